"""Persistent, resumable run directories; the single source of truth for
RunState.

Layout (normative):

    run_dir/
      manifest.json                      # config, schema, status, cursors,
                                         # admitted candidates, completed keys
      morphologies/<id>.json
      rewards/<id>.json
      grid/<mid>_<rid>.json
      fine/<mid>_<rid>/iter_<n>_<phase>.json
      report/report.{md,csv}
      state.json                         # canonical serialization, written on
                                         # completion; excludes volatile fields

Every write is temp-then-rename, so killing the process at any point leaves
a resumable directory. The manifest's completed-key set and candidate lists
are append-only, and each manifest update also snapshots the mock-provider
cursor so resumed runs replay instead of re-consuming fixture responses.
"""

from __future__ import annotations

import dataclasses
import datetime
import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .diversity import report as diversity_report
from .errors import CodesignError
from .model import (
    CemSettings,
    EvaluationResult,
    EvaluatorSpec,
    FineStep,
    MorphologyCandidate,
    MorphologySchema,
    ParamSpec,
    ProviderSpec,
    RewardCandidate,
    RunConfig,
    RunState,
)
from .prompts import TaskContext

MANIFEST_VERSION = 1


class DirNotEmpty(CodesignError):
    pass


class DuplicateKey(CodesignError):
    pass


class CorruptRun(CodesignError):
    pass


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# --------------------------------------------------- dict <-> dataclass

def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    ev = dict(d.pop("evaluator"))
    ev["cem"] = CemSettings(**ev["cem"])
    ev["argv"] = tuple(ev.get("argv", ()))
    llm = ProviderSpec(**d.pop("llm"))
    return RunConfig(evaluator=EvaluatorSpec(**ev), llm=llm, **d)


def schema_to_dict(schema: MorphologySchema) -> dict:
    return {
        "name": schema.name,
        "params": [dataclasses.asdict(p) for p in schema.params],
        "structure_template": schema.structure_template,
    }


def schema_from_dict(d: dict) -> MorphologySchema:
    return MorphologySchema(
        name=d["name"],
        params=tuple(ParamSpec(**p) for p in d["params"]),
        structure_template=d["structure_template"],
    )


def schema_fingerprint(schema: MorphologySchema) -> str:
    import hashlib

    return hashlib.sha256(_dump(schema_to_dict(schema)).encode()).hexdigest()


def morphology_to_dict(c: MorphologyCandidate) -> dict:
    return {
        "id": c.id,
        "values": c.values,
        "provenance": c.provenance,
        "parent_id": c.parent_id,
        "clamped": list(c.clamped),
    }


def morphology_from_dict(d: dict) -> MorphologyCandidate:
    return MorphologyCandidate(
        id=d["id"],
        values={k: float(v) for k, v in d["values"].items()},
        provenance=d["provenance"],
        parent_id=d.get("parent_id"),
        clamped=tuple(d.get("clamped", ())),
    )


def reward_to_dict(c: RewardCandidate) -> dict:
    return {
        "id": c.id,
        "source": c.source,
        "dialect": c.dialect,
        "provenance": c.provenance,
        "parent_id": c.parent_id,
    }


def reward_from_dict(d: dict) -> RewardCandidate:
    return RewardCandidate(
        id=d["id"],
        source=d["source"],
        dialect=d["dialect"],
        provenance=d["provenance"],
        parent_id=d.get("parent_id"),
    )


def result_to_dict(r: EvaluationResult, volatile: bool = True) -> dict:
    d = {
        "pair": list(r.pair),
        "status": r.status,
        "fitness": r.fitness,
        "volume": r.volume,
        "efficiency": r.efficiency,
        "train_return": r.train_return,
        "seed": r.seed,
        "detail": r.detail,
    }
    if volatile:
        d["wall_time"] = r.wall_time
    return d


def result_from_dict(d: dict) -> EvaluationResult:
    return EvaluationResult(
        pair=(d["pair"][0], d["pair"][1]),
        status=d["status"],
        fitness=d["fitness"],
        volume=d["volume"],
        efficiency=d["efficiency"],
        train_return=d["train_return"],
        wall_time=d.get("wall_time", 0.0),
        seed=d["seed"],
        detail=d.get("detail"),
    )


def task_context_to_dict(ctx: TaskContext) -> dict:
    return dataclasses.asdict(ctx)


def task_context_from_dict(d: dict) -> TaskContext:
    return TaskContext(**d)


# ----------------------------------------------------------- run store


def grid_key(mid: str, rid: str) -> str:
    return f"grid:{mid}:{rid}"


def fine_key(mid: str, rid: str, iteration: int, phase: str) -> str:
    return f"fine:{mid}:{rid}:{iteration}:{phase}"


@dataclass
class Pending:
    """Work remaining after a resume scan."""

    missing_morphologies: int
    missing_rewards: int
    grid_keys: list[tuple[str, str]]

    @property
    def empty(self) -> bool:
        return not (self.missing_morphologies or self.missing_rewards or self.grid_keys)


class RunStore:
    """Owns one run directory. ``record*`` methods may be called from
    concurrent evaluation completions; writes are serialized internally."""

    def __init__(self, directory: str | Path, manifest: dict):
        self.dir = Path(directory)
        self.manifest = manifest
        self._lock = threading.Lock()

    # -- construction

    @classmethod
    def init_run(
        cls,
        directory: str | Path,
        cfg: RunConfig,
        schema: MorphologySchema,
        task_context: TaskContext,
    ) -> "RunStore":
        directory = Path(directory)
        if directory.exists() and any(directory.iterdir()):
            raise DirNotEmpty(str(directory))
        directory.mkdir(parents=True, exist_ok=True)
        for sub in ("morphologies", "rewards", "grid", "fine", "report"):
            (directory / sub).mkdir()
        now = datetime.datetime.now(datetime.timezone.utc).isoformat()
        manifest = {
            "version": MANIFEST_VERSION,
            "config": config_to_dict(cfg),
            "schema": schema_to_dict(schema),
            "schema_fingerprint": schema_fingerprint(schema),
            "task_context": task_context_to_dict(task_context),
            "seed": cfg.seed,
            "status": "coarse",
            "created": now,
            "updated": now,
            "morphologies": [],
            "rewards": [],
            "completed": [],
            "llm_cursor": {},
            "fine_progress": {},
        }
        store = cls(directory, manifest)
        store._write_manifest()
        return store

    @classmethod
    def open(cls, directory: str | Path) -> "RunStore":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.is_file():
            raise CorruptRun(f"no manifest in {directory}")
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise CorruptRun(f"manifest unreadable: {exc}") from None
        if manifest.get("version") != MANIFEST_VERSION:
            raise CorruptRun(f"manifest version {manifest.get('version')!r} unsupported")
        return cls(directory, manifest)

    def _write_manifest(self) -> None:
        self.manifest["updated"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
        _atomic_write(self.dir / "manifest.json", _dump(self.manifest))

    # -- accessors

    @property
    def status(self) -> str:
        return self.manifest["status"]

    def config(self) -> RunConfig:
        return config_from_dict(self.manifest["config"])

    def schema(self) -> MorphologySchema:
        return schema_from_dict(self.manifest["schema"])

    def task_context(self) -> TaskContext:
        return task_context_from_dict(self.manifest["task_context"])

    def llm_cursor(self) -> dict[str, int]:
        return dict(self.manifest["llm_cursor"])

    def completed(self) -> set[str]:
        return set(self.manifest["completed"])

    def fine_progress(self, pair_key: str) -> Optional[dict]:
        return self.manifest.get("fine_progress", {}).get(pair_key)

    # -- mutation

    def set_status(self, status: str) -> None:
        with self._lock:
            self.manifest["status"] = status
            self._write_manifest()

    def mark_fine_phase(
        self, pair_key: str, iteration: int, phase: str, llm_cursor: dict[str, int]
    ) -> None:
        """Advance a pair's fine-stage position marker. Also written by
        record(); called directly for phases that produced no step (an
        unusable refinement response), so resume never replays their
        provider consumption."""
        with self._lock:
            self._set_progress(pair_key, iteration, phase, done=False)
            self.manifest["llm_cursor"] = dict(llm_cursor)
            self._write_manifest()

    def mark_fine_done(self, pair_key: str, llm_cursor: dict[str, int]) -> None:
        with self._lock:
            progress = self.manifest.setdefault("fine_progress", {}).setdefault(
                pair_key, {"iteration": 0, "phase": "reward"}
            )
            progress["done"] = True
            self.manifest["llm_cursor"] = dict(llm_cursor)
            self._write_manifest()

    def _set_progress(self, pair_key: str, iteration: int, phase: str, done: bool) -> None:
        table = self.manifest.setdefault("fine_progress", {})
        entry = table.get(pair_key, {"iteration": 0, "phase": "reward", "done": False})
        entry.update({"iteration": iteration, "phase": phase, "done": done})
        table[pair_key] = entry

    def record_candidate(self, candidate, llm_cursor: dict[str, int]) -> None:
        """Persist an admitted candidate and the provider cursor in one
        durable step (candidate file first, then the manifest)."""
        if isinstance(candidate, MorphologyCandidate):
            sub, key, payload = "morphologies", "morphologies", morphology_to_dict(candidate)
        elif isinstance(candidate, RewardCandidate):
            sub, key, payload = "rewards", "rewards", reward_to_dict(candidate)
        else:
            raise TypeError(f"not a candidate: {candidate!r}")
        with self._lock:
            _atomic_write(self.dir / sub / f"{candidate.id}.json", _dump(payload))
            if candidate.id not in self.manifest[key]:
                self.manifest[key].append(candidate.id)
            self.manifest["llm_cursor"] = dict(llm_cursor)
            self._write_manifest()

    def record(self, key: str, result: EvaluationResult,
               llm_cursor: Optional[dict[str, int]] = None,
               fine_step: Optional[FineStep] = None,
               fine_candidate=None) -> None:
        """Persist one evaluation under its key (result file first, then one
        atomic manifest update). DuplicateKey if the key is already
        completed."""
        with self._lock:
            if key in self.manifest["completed"]:
                raise DuplicateKey(key)
            parts = key.split(":")
            if parts[0] == "grid":
                path = self.dir / "grid" / f"{parts[1]}_{parts[2]}.json"
                payload = result_to_dict(result)
            elif parts[0] == "fine":
                if fine_step is None or fine_candidate is None:
                    raise CodesignError("fine records require the step and candidate")
                pair_dir = self.dir / "fine" / f"{parts[1]}_{parts[2]}"
                pair_dir.mkdir(exist_ok=True)
                path = pair_dir / f"iter_{parts[3]}_{parts[4]}.json"
                if isinstance(fine_candidate, MorphologyCandidate):
                    cand = {"kind": "morphology", **morphology_to_dict(fine_candidate)}
                else:
                    cand = {"kind": "reward", **reward_to_dict(fine_candidate)}
                payload = {
                    "iteration": fine_step.iteration,
                    "phase": fine_step.phase,
                    "candidate_id": fine_step.candidate_id,
                    "accepted": fine_step.accepted,
                    "candidate": cand,
                    "result": result_to_dict(result),
                }
            else:
                raise CodesignError(f"unknown key stage {parts[0]!r}")
            _atomic_write(path, _dump(payload))
            self.manifest["completed"].append(key)
            if llm_cursor is not None:
                self.manifest["llm_cursor"] = dict(llm_cursor)
            if parts[0] == "fine":
                self._set_progress(
                    f"{parts[1]}_{parts[2]}", int(parts[3]), parts[4], done=False
                )
            self._write_manifest()

    # -- reading back

    def _read_json(self, path: Path) -> dict:
        if not path.is_file():
            raise CorruptRun(f"manifest references missing file {path}")
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CorruptRun(f"unreadable {path}: {exc}") from None

    def load_state(self) -> RunState:
        """Reconstruct RunState from the manifest and per-item files."""
        cfg = self.config()
        schema = self.schema()
        state = RunState(config=cfg, schema=schema, status=self.status)
        for mid in self.manifest["morphologies"]:
            state.morphologies.append(
                morphology_from_dict(self._read_json(self.dir / "morphologies" / f"{mid}.json"))
            )
        for rid in self.manifest["rewards"]:
            state.rewards.append(
                reward_from_dict(self._read_json(self.dir / "rewards" / f"{rid}.json"))
            )
        fine_steps: dict[tuple[str, str], dict[tuple[int, str], FineStep]] = {}
        for key in self.manifest["completed"]:
            parts = key.split(":")
            if parts[0] == "grid":
                d = self._read_json(self.dir / "grid" / f"{parts[1]}_{parts[2]}.json")
                state.grid[(parts[1], parts[2])] = result_from_dict(d)
            elif parts[0] == "fine":
                pair = (parts[1], parts[2])
                d = self._read_json(
                    self.dir / "fine" / f"{parts[1]}_{parts[2]}" / f"iter_{parts[3]}_{parts[4]}.json"
                )
                cand_d = dict(d["candidate"])
                kind = cand_d.pop("kind")
                if kind == "morphology":
                    cand = morphology_from_dict(cand_d)
                else:
                    cand = reward_from_dict(cand_d)
                step = FineStep(
                    iteration=d["iteration"],
                    phase=d["phase"],
                    candidate_id=d["candidate_id"],
                    result=result_from_dict(d["result"]),
                    accepted=d["accepted"],
                )
                state.fine_candidates[cand.id] = cand
                fine_steps.setdefault(pair, {})[(step.iteration, step.phase)] = step
        for pair, by_key in fine_steps.items():
            ordered = sorted(by_key.items(), key=lambda kv: (kv[0][0], 0 if kv[0][1] == "morphology" else 1))
            state.fine_trajectories[pair] = [s for _, s in ordered]
        return state

    def resume(self) -> tuple[RunState, Pending]:
        """Rebuild state and compute remaining work. CorruptRun if the
        manifest references files that are gone."""
        state = self.load_state()
        cfg = state.config
        missing_m = max(0, cfg.n_morphologies - len(state.morphologies))
        missing_r = max(0, cfg.n_rewards - len(state.rewards))
        pending_grid: list[tuple[str, str]] = []
        if not missing_m and not missing_r:
            for m in state.morphologies:
                for r in state.rewards:
                    if (m.id, r.id) not in state.grid:
                        pending_grid.append((m.id, r.id))
        return state, Pending(missing_m, missing_r, pending_grid)

    # -- canonical serialization & reports

    def save_state(self, state: RunState) -> Path:
        path = self.dir / "state.json"
        _atomic_write(path, serialize_state(state))
        return path

    def write_report(self, state: RunState, fmt: str = "md") -> Path:
        if fmt not in ("csv", "md"):
            raise CodesignError(f"unknown report format {fmt!r}")
        if state.status == "coarse":
            raise CodesignError("report requires the coarse stage to be finished")
        text = render_report_md(state) if fmt == "md" else render_report_csv(state)
        path = self.dir / "report" / f"report.{fmt}"
        _atomic_write(path, text)
        return path


def serialize_state(state: RunState) -> str:
    """Canonical text form of a RunState: stable key order, volatile fields
    (wall-clock times, timestamps) excluded. Two runs of the same fixture and
    seed serialize byte-identically."""
    fine = {}
    for (mid, rid), steps in sorted(state.fine_trajectories.items()):
        fine[f"{mid}_{rid}"] = [
            {
                "iteration": s.iteration,
                "phase": s.phase,
                "candidate_id": s.candidate_id,
                "accepted": s.accepted,
                "result": result_to_dict(s.result, volatile=False),
            }
            for s in steps
        ]
    doc = {
        "config": config_to_dict(state.config),
        "schema": schema_to_dict(state.schema),
        "status": state.status,
        "morphologies": [morphology_to_dict(m) for m in state.morphologies],
        "rewards": [reward_to_dict(r) for r in state.rewards],
        "grid": {
            f"{mid}_{rid}": result_to_dict(res, volatile=False)
            for (mid, rid), res in sorted(state.grid.items())
        },
        "selected": [list(p) for p in state.selected],
        "fine_candidates": {
            cid: (
                {"kind": "morphology", **morphology_to_dict(c)}
                if isinstance(c, MorphologyCandidate)
                else {"kind": "reward", **reward_to_dict(c)}
            )
            for cid, c in sorted(state.fine_candidates.items())
        },
        "fine": fine,
    }
    return _dump(doc)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _best_pair(state: RunState):
    pairs = state.selected or sorted(state.fine_trajectories)
    candidates = []
    for pair in pairs:
        if pair not in state.grid or not state.grid[pair].ok:
            continue
        eff, mid, rid, fitness = _incumbent_summary(state, pair)
        candidates.append((eff, (mid, rid), fitness))
    if not candidates:
        candidates = [
            (res.efficiency, pair, res.fitness) for pair, res in state.grid.items() if res.ok
        ]
    if not candidates:
        return None
    candidates.sort(key=lambda t: (-t[0], t[1]))
    return candidates[0]


def _incumbent_summary(state: RunState, pair: tuple[str, str]):
    res = state.grid[pair]
    best_eff, best_fit = res.efficiency, res.fitness
    mid, rid = pair
    for step in state.fine_trajectories.get(pair, ()):
        if step.accepted and step.result.ok:
            best_eff, best_fit = step.result.efficiency, step.result.fitness
            if step.phase == "morphology":
                mid = step.candidate_id
            else:
                rid = step.candidate_id
    return best_eff, mid, rid, best_fit


def _diversity_rows(state: RunState):
    try:
        rep = diversity_report(
            [m.values for m in state.morphologies],
            [r.source for r in state.rewards],
            state.schema,
        )
    except CodesignError:
        return None
    return rep


def render_report_md(state: RunState) -> str:
    lines = ["# Run report", "", f"status: {state.status}", ""]
    lines += ["## Grid", "", "| morphology | reward | status | fitness | volume | efficiency |",
              "|---|---|---|---|---|---|"]
    for (mid, rid), res in sorted(state.grid.items()):
        lines.append(
            f"| {mid} | {rid} | {res.status} | {_fmt(res.fitness)} | "
            f"{_fmt(res.volume)} | {_fmt(res.efficiency)} |"
        )
    lines.append("")
    best = _best_pair(state)
    lines.append("## Best pair")
    lines.append("")
    if best is None:
        lines.append("No viable pair: every evaluation failed.")
    else:
        eff, (mid, rid), fitness = best
        lines.append(f"{mid} + {rid}: efficiency {_fmt(eff)}, fitness {_fmt(fitness)}")
    lines.append("")
    rep = _diversity_rows(state)
    lines.append("## Diversity")
    lines.append("")
    if rep is None:
        lines.append("Not enough samples for diversity metrics.")
    else:
        lines += ["| parameter | cv |", "|---|---|"]
        for name, cv in rep.per_param_cv.items():
            lines.append(f"| {name} | {_fmt(cv) if cv is not None else 'undefined'} |")
        lines.append(f"| aggregate | {_fmt(rep.aggregate_cv)} |")
        lines.append("")
        lines.append(f"Reward Self-BLEU: {_fmt(rep.self_bleu)}")
        lines.append(f"Samples: {rep.sample_count}")
    lines.append("")
    if state.fine_trajectories:
        lines.append("## Fine trajectories")
        lines.append("")
        lines += ["| pair | iteration | phase | candidate | accepted | efficiency |",
                  "|---|---|---|---|---|---|"]
        for (mid, rid), steps in sorted(state.fine_trajectories.items()):
            for s in steps:
                lines.append(
                    f"| {mid}_{rid} | {s.iteration} | {s.phase} | {s.candidate_id} | "
                    f"{s.accepted} | {_fmt(s.result.efficiency)} |"
                )
        lines.append("")
    return "\n".join(lines) + "\n"


def render_report_csv(state: RunState) -> str:
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["section", "a", "b", "c", "d", "e", "f"])
    for (mid, rid), res in sorted(state.grid.items()):
        w.writerow(["grid", mid, rid, res.status, _fmt(res.fitness),
                    _fmt(res.volume), _fmt(res.efficiency)])
    best = _best_pair(state)
    if best is None:
        w.writerow(["best", "", "", "none", "", "", ""])
    else:
        eff, (mid, rid), fitness = best
        w.writerow(["best", mid, rid, "ok", _fmt(fitness), "", _fmt(eff)])
    rep = _diversity_rows(state)
    if rep is not None:
        for name, cv in rep.per_param_cv.items():
            w.writerow(["diversity_cv", name, _fmt(cv) if cv is not None else "undefined",
                        "", "", "", ""])
        w.writerow(["diversity_cv", "aggregate", _fmt(rep.aggregate_cv), "", "", "", ""])
        w.writerow(["diversity_selfbleu", "", _fmt(rep.self_bleu), "", "", "", ""])
        w.writerow(["diversity_samples", "", str(rep.sample_count), "", "", "", ""])
    for (mid, rid), steps in sorted(state.fine_trajectories.items()):
        for s in steps:
            w.writerow(["fine", f"{mid}_{rid}", str(s.iteration), s.phase,
                        s.candidate_id, str(s.accepted), _fmt(s.result.efficiency)])
    return buf.getvalue()
