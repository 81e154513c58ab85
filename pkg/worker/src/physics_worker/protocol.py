"""Line-delimited JSON protocol loop (version 1): hello, then one result
per evaluate message, with progress heartbeats while a job runs. All logs
go to stderr; stdout carries protocol messages only. A failing job becomes
an error result, never a dead loop."""

from __future__ import annotations

import json
import math
import sys
import threading
import time

from . import sac
from .config import WorkerConfig
from .envs import REGISTRY
from .rewards import RewardCompileError, RewardFn, RewardRuntimeError
from .structure import UnresolvedMask, render_structure

PROTOCOL_VERSION = 1


def log(text: str) -> None:
    sys.stderr.write(f"physics-worker: {text}\n")
    sys.stderr.flush()


class Server:
    def __init__(self, config: WorkerConfig, stdin=None, stdout=None):
        self.config = config
        self.stdin = stdin or sys.stdin
        self.stdout = stdout or sys.stdout
        self._out_lock = threading.Lock()
        names = {"stub", config.environment} & set(REGISTRY)
        self.schemas = sorted(names)
        self._template_override = None
        if config.structure_template_path:
            with open(config.structure_template_path) as fh:
                self._template_override = fh.read()

    def emit(self, message: dict) -> None:
        with self._out_lock:
            self.stdout.write(json.dumps(message, sort_keys=True) + "\n")
            self.stdout.flush()

    def serve(self) -> None:
        self.emit({"type": "hello", "protocol": PROTOCOL_VERSION, "schemas": self.schemas})
        log(f"serving schemas {self.schemas}")
        for line in self.stdin:
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError:
                log(f"ignoring non-JSON input line: {line[:80]!r}")
                continue
            if msg.get("type") != "evaluate":
                log(f"ignoring message of type {msg.get('type')!r}")
                continue
            self.handle_job(msg)

    # -- one job ----------------------------------------------------------

    def handle_job(self, msg: dict) -> None:
        job_id = msg.get("job_id", "?")
        self.emit({"type": "progress", "job_id": job_id, "detail": "accepted"})
        stop = threading.Event()

        def heartbeat():
            while not stop.wait(self.config.heartbeat_s):
                self.emit({"type": "progress", "job_id": job_id, "detail": "alive"})

        ticker = threading.Thread(target=heartbeat, daemon=True)
        ticker.start()
        try:
            result = self.run_job(msg)
        except Exception as exc:  # last resort: the loop must survive
            log(f"job {job_id} raised {type(exc).__name__}: {exc}")
            result = {"status": "runtime_error", "detail": f"{type(exc).__name__}: {exc}"}
        finally:
            stop.set()
            ticker.join()
        result.update({"type": "result", "job_id": job_id})
        self.emit(result)

    def run_job(self, msg: dict) -> dict:
        schema = msg.get("schema")
        if schema not in self.schemas:
            return {
                "status": "runtime_error",
                "detail": f"unknown schema {schema!r}; serving {self.schemas}",
            }
        spec = REGISTRY[schema]
        template = spec.template
        if self._template_override and schema == self.config.environment:
            template = self._template_override

        try:
            document = render_structure(template, msg.get("morphology", {}))
            params = spec.parse(document)
        except (UnresolvedMask, ValueError) as exc:
            return {"status": "runtime_error", "detail": f"structure: {exc}"}

        probe = spec.make(params)
        try:
            reward_fn = RewardFn(msg.get("reward_source", ""), probe.observation_names)
        except RewardCompileError as exc:
            return {"status": "reward_parse_error", "detail": str(exc)}

        job_id = msg.get("job_id", "?")
        seed = int(msg.get("seed", 0))
        budget = int(msg.get("training_budget", 0))
        policy = None
        try:
            if budget > 0:
                deadline = time.monotonic() + self.config.train_timeout_s
                policy = sac.train(
                    lambda: spec.make(params),
                    reward_fn,
                    self.config.sac,
                    budget,
                    seed=seed,
                    progress=lambda steps: self.emit(
                        {"type": "progress", "job_id": job_id, "detail": f"step {steps}/{budget}"}
                    ),
                    deadline=deadline,
                )
            fitness = sac.rollout(spec.make(params), policy, seed=seed)
        except sac.TrainTimeout as exc:
            return {"status": "timeout", "detail": str(exc)}
        except RewardRuntimeError as exc:
            return {"status": "runtime_error", "detail": f"reward: {exc}"}
        except Exception as exc:
            return {"status": "runtime_error", "detail": f"{type(exc).__name__}: {exc}"}

        volume = spec.volume(params)
        if not (math.isfinite(fitness) and math.isfinite(volume)):
            return {"status": "nonfinite", "detail": f"fitness={fitness!r} volume={volume!r}"}
        return {
            "status": "ok",
            "fitness": float(fitness),
            "volume": float(volume),
            "train_return": None,
        }
