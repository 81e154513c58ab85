"""External evaluator processes speaking a line-delimited JSON protocol over
stdin/stdout (see docs/protocol.md). The bridge owns timeouts, heartbeats and
crash recovery: a failed worker is killed, respawned once and the job retried
once; a second failure becomes a timeout/runtime_error result rather than an
engine failure, because broken generated reward code is a normal outcome.
"""

from __future__ import annotations

import json
import logging
import queue
import subprocess
import threading
from dataclasses import dataclass
from typing import Optional

from .errors import CodesignError
from .model import EvaluationResult, RESULT_STATUSES, make_result

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
HANDSHAKE_TIMEOUT = 10.0
DEFAULT_IDLE_TIMEOUT = 1800.0


class SpawnError(CodesignError):
    pass


class HandshakeTimeout(CodesignError):
    pass


class ProtocolVersionMismatch(CodesignError):
    pass


class WorkerCrashed(CodesignError):
    """Worker exited, closed its pipe, or violated the protocol mid-job."""


class WorkerUnrecoverable(CodesignError):
    """Respawning the worker itself failed; the run cannot continue."""


class _IdleTimeout(Exception):
    pass


@dataclass(frozen=True)
class EvaluatorJob:
    job_id: str
    schema_name: str
    values: dict[str, float]
    reward_source: str
    reward_dialect: str
    training_budget: int
    seed: int
    timeout: float = DEFAULT_IDLE_TIMEOUT

    def __post_init__(self):
        if self.timeout <= 0:
            raise CodesignError("job timeout must be > 0")

    def to_message(self) -> dict:
        return {
            "type": "evaluate",
            "job_id": self.job_id,
            "schema": self.schema_name,
            "morphology": self.values,
            "reward_source": self.reward_source,
            "reward_dialect": self.reward_dialect,
            "training_budget": self.training_budget,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class EvaluatorReply:
    job_id: str
    kind: str  # "progress" | "result"
    status: Optional[str] = None
    fitness: Optional[float] = None
    volume: Optional[float] = None
    train_return: Optional[float] = None
    detail: Optional[str] = None


_EOF = object()


class WorkerHandle:
    """One child process plus a reader thread draining its stdout."""

    def __init__(self, cmd: list[str], handshake_timeout: float = HANDSHAKE_TIMEOUT):
        self.cmd = list(cmd)
        try:
            self.proc = subprocess.Popen(
                self.cmd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=None,  # worker logs pass through to our stderr
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise SpawnError(f"cannot spawn {self.cmd!r}: {exc}") from None
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._drain, daemon=True)
        self._reader.start()
        hello = self._handshake(handshake_timeout)
        self.schemas: list[str] = list(hello.get("schemas", ()))

    def _drain(self):
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(_EOF)

    def _handshake(self, timeout: float) -> dict:
        try:
            msg = self.read(timeout)
        except _IdleTimeout:
            self.kill()
            raise HandshakeTimeout(f"no hello within {timeout}s from {self.cmd!r}") from None
        except WorkerCrashed as exc:
            self.kill()
            raise SpawnError(f"worker exited before hello: {exc}") from None
        if msg.get("type") != "hello":
            self.kill()
            raise SpawnError(f"first message was not hello: {msg!r}")
        if msg.get("protocol") != PROTOCOL_VERSION:
            self.kill()
            raise ProtocolVersionMismatch(
                f"worker speaks protocol {msg.get('protocol')!r}, need {PROTOCOL_VERSION}"
            )
        return msg

    def send(self, message: dict) -> None:
        try:
            self.proc.stdin.write(json.dumps(message, sort_keys=True) + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise WorkerCrashed(f"write failed: {exc}") from None

    def read(self, timeout: float) -> dict:
        """Next protocol message; raises _IdleTimeout after `timeout` seconds
        of silence and WorkerCrashed on EOF or a non-JSON stdout line."""
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            raise _IdleTimeout() from None
        if line is _EOF:
            raise WorkerCrashed(f"worker exited (code {self.proc.poll()!r})")
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            raise WorkerCrashed(f"non-JSON line on stdout: {line!r}") from None
        if not isinstance(msg, dict):
            raise WorkerCrashed(f"protocol message must be an object: {line!r}")
        return msg

    @property
    def alive(self) -> bool:
        return self.proc.poll() is None

    def kill(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass


def spawn(cmd: list[str], handshake_timeout: float = HANDSHAKE_TIMEOUT) -> WorkerHandle:
    """Start a worker and complete the hello handshake."""
    return WorkerHandle(cmd, handshake_timeout)


def _parse_reply(msg: dict, expected_job: str) -> EvaluatorReply:
    kind = msg.get("type")
    if kind not in ("progress", "result"):
        raise WorkerCrashed(f"unexpected message type {kind!r}")
    job_id = msg.get("job_id")
    if job_id != expected_job:
        raise WorkerCrashed(f"reply for job {job_id!r} while running {expected_job!r}")
    if kind == "progress":
        return EvaluatorReply(job_id=job_id, kind="progress", detail=msg.get("detail"))
    status = msg.get("status")
    if status not in RESULT_STATUSES:
        raise WorkerCrashed(f"unknown result status {status!r}")

    def num(field):
        value = msg.get(field)
        if value is None:
            return None
        try:
            return float(value)
        except (TypeError, ValueError):
            raise WorkerCrashed(f"non-numeric {field} in result: {value!r}") from None

    return EvaluatorReply(
        job_id=job_id,
        kind="result",
        status=status,
        fitness=num("fitness"),
        volume=num("volume"),
        train_return=num("train_return"),
        detail=msg.get("detail"),
    )


class Worker:
    """A respawnable worker executing one job at a time."""

    def __init__(self, cmd: list[str], handshake_timeout: float = HANDSHAKE_TIMEOUT):
        self.cmd = list(cmd)
        self.handshake_timeout = handshake_timeout
        self.handle = spawn(self.cmd, handshake_timeout)

    def _respawn(self) -> None:
        self.handle.kill()
        try:
            self.handle = spawn(self.cmd, self.handshake_timeout)
        except CodesignError as exc:
            raise WorkerUnrecoverable(f"respawn failed: {exc}") from None

    def _run_job(self, job: EvaluatorJob, morphology_id: str, reward_id: str) -> EvaluationResult:
        self.handle.send(job.to_message())
        while True:
            reply = _parse_reply(self.handle.read(job.timeout), job.job_id)
            if reply.kind == "progress":
                continue  # each progress line resets the idle clock
            return make_result(
                morphology_id,
                reward_id,
                reply.status,
                fitness=reply.fitness,
                volume=reply.volume,
                train_return=reply.train_return,
                seed=job.seed,
                detail=reply.detail,
            )

    def evaluate(self, job: EvaluatorJob, morphology_id: str, reward_id: str) -> EvaluationResult:
        """Run a job with one respawn-and-retry on timeout or crash. Always
        produces exactly one result for the job."""
        for attempt in (0, 1):
            try:
                return self._run_job(job, morphology_id, reward_id)
            except _IdleTimeout:
                log.warning("job %s timed out (attempt %d)", job.job_id, attempt + 1)
                self.handle.kill()
                if attempt == 1:
                    return make_result(
                        morphology_id, reward_id, "timeout", seed=job.seed,
                        detail=f"no message within {job.timeout}s, twice",
                    )
                self._respawn()
            except WorkerCrashed as exc:
                log.warning("job %s crashed worker: %s (attempt %d)", job.job_id, exc, attempt + 1)
                self.handle.kill()
                if attempt == 1:
                    return make_result(
                        morphology_id, reward_id, "runtime_error", seed=job.seed,
                        detail=f"worker failed twice: {exc}",
                    )
                self._respawn()
        raise AssertionError("unreachable")

    def close(self) -> None:
        self.handle.kill()


def evaluate_remote(worker: Worker, job: EvaluatorJob,
                    morphology_id: str, reward_id: str) -> EvaluationResult:
    return worker.evaluate(job, morphology_id, reward_id)


class BridgeEvaluator:
    """Evaluator backend dispatching jobs to a pool of worker processes.

    Each worker runs one job at a time; collection is order-independent
    because every result is keyed by its pair.
    """

    kind = "subprocess"

    def __init__(
        self,
        argv: list[str],
        schema,
        workers: int = 2,
        timeout: float = DEFAULT_IDLE_TIMEOUT,
        training_budget: int = 500_000,
    ):
        self.argv = list(argv)
        self.schema = schema
        self.reward_dialect = "external_code"
        self.timeout = timeout
        self.training_budget = training_budget
        self.pool_size = max(1, workers)
        self._workers: list[Worker] = [Worker(self.argv)]
        self._lock = threading.Lock()

    def _job(self, morphology, reward, seed: int) -> EvaluatorJob:
        return EvaluatorJob(
            job_id=f"{morphology.id}-{reward.id}-{seed}",
            schema_name=self.schema.name,
            values=morphology.values,
            reward_source=reward.source,
            reward_dialect=reward.dialect,
            training_budget=self.training_budget,
            seed=seed,
            timeout=self.timeout,
        )

    def evaluate(self, morphology, reward, seed: int) -> EvaluationResult:
        return self._workers[0].evaluate(self._job(morphology, reward, seed), morphology.id, reward.id)

    def evaluate_many(self, jobs, on_result) -> None:
        jobs = list(jobs)
        while len(self._workers) < min(self.pool_size, len(jobs)):
            self._workers.append(Worker(self.argv))
        pending: queue.Queue = queue.Queue()
        for item in jobs:
            pending.put(item)
        errors: list[Exception] = []

        def run(worker: Worker):
            while True:
                try:
                    morphology, reward, seed = pending.get_nowait()
                except queue.Empty:
                    return
                try:
                    result = worker.evaluate(
                        self._job(morphology, reward, seed), morphology.id, reward.id
                    )
                except Exception as exc:
                    errors.append(exc)
                    return
                with self._lock:
                    on_result(result)

        threads = [
            threading.Thread(target=run, args=(w,), daemon=True)
            for w in self._workers[: max(1, min(self.pool_size, len(jobs)))]
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]

    def close(self) -> None:
        for w in self._workers:
            w.close()
