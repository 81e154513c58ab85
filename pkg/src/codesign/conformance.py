"""Conformance checks for external evaluator workers.

Runs a worker command through the protocol surface an engine relies on:
handshake, message ordering, heartbeat cadence, per-job failure isolation
and stdout discipline. Returns one record per check so both the engine's
own tests and worker packages can assert on them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from .bridge import (
    EvaluatorJob,
    HANDSHAKE_TIMEOUT,
    WorkerHandle,
    _parse_reply,
    spawn,
)

HEARTBEAT_LIMIT = 60.0


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


def _drive_job(handle: WorkerHandle, job: EvaluatorJob):
    """Send one job; returns (replies, max_gap_seconds)."""
    handle.send(job.to_message())
    replies = []
    max_gap = 0.0
    last = time.monotonic()
    while True:
        msg = handle.read(job.timeout)
        now = time.monotonic()
        max_gap = max(max_gap, now - last)
        last = now
        reply = _parse_reply(msg, job.job_id)
        replies.append(reply)
        if reply.kind == "result":
            return replies, max_gap


def run_conformance(
    cmd: list[str],
    schema_name: str = "stub",
    good_values: dict | None = None,
    timeout: float = 120.0,
) -> list[Check]:
    """Exercise a worker command; every returned check should pass."""
    checks: list[Check] = []
    values = good_values or {}

    def job(job_id: str, source: str, budget: int = 0) -> EvaluatorJob:
        return EvaluatorJob(
            job_id=job_id,
            schema_name=schema_name,
            values=values,
            reward_source=source,
            reward_dialect="external_code",
            training_budget=budget,
            seed=7,
            timeout=timeout,
        )

    try:
        handle = spawn(cmd, HANDSHAKE_TIMEOUT)
    except Exception as exc:
        return [Check("handshake", False, f"{type(exc).__name__}: {exc}")]
    checks.append(Check("handshake", True, f"schemas: {handle.schemas}"))
    checks.append(
        Check(
            "advertises_schema",
            schema_name in handle.schemas,
            f"want {schema_name!r} in {handle.schemas}",
        )
    )

    try:
        replies, gap = _drive_job(handle, job("conf-ok", "0.0"))
        result = replies[-1]
        ordering = all(r.kind == "progress" for r in replies[:-1])
        checks.append(Check("evaluate_result", result.kind == "result", result.status or ""))
        checks.append(Check("message_ordering", ordering))
        checks.append(
            Check(
                "has_progress_heartbeat",
                any(r.kind == "progress" for r in replies),
                "worker must emit progress at least once per job",
            )
        )
        checks.append(Check("heartbeat_cadence", gap <= HEARTBEAT_LIMIT, f"max gap {gap:.1f}s"))
        ok_fields = (
            result.status != "ok"
            or (result.volume is not None and result.volume > 0 and result.fitness is not None)
        )
        checks.append(Check("result_fields", ok_fields))

        # A broken reward must produce an error result, not kill the loop.
        replies, _ = _drive_job(handle, job("conf-bad", "this is ( not / valid"))
        bad = replies[-1]
        checks.append(
            Check(
                "failure_is_result",
                bad.status in ("reward_parse_error", "runtime_error"),
                f"status {bad.status!r}",
            )
        )
        replies, _ = _drive_job(handle, job("conf-after", "0.0"))
        checks.append(
            Check("survives_failure", replies[-1].kind == "result", replies[-1].status or "")
        )

        # Unknown schema: an error result with detail, still per-job.
        unknown = EvaluatorJob(
            job_id="conf-schema",
            schema_name="no-such-schema",
            values=values,
            reward_source="0.0",
            reward_dialect="external_code",
            training_budget=0,
            seed=7,
            timeout=timeout,
        )
        replies, _ = _drive_job(handle, unknown)
        checks.append(
            Check(
                "unknown_schema_is_runtime_error",
                replies[-1].status == "runtime_error" and bool(replies[-1].detail),
                f"status {replies[-1].status!r}",
            )
        )
    except Exception as exc:
        checks.append(Check("protocol", False, f"{type(exc).__name__}: {exc}"))
    finally:
        handle.kill()
    return checks
