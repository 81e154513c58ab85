"""Domain types shared across the engine: design schemas, candidates,
evaluation results and run configuration/state.

All types are immutable values once constructed; mutation happens only by
replacing whole objects inside the single coordinating sequence that owns a
run. Everything serializes to plain JSON-compatible dicts (see
``run_store``); the canonical state serialization deliberately excludes
volatile fields such as wall-clock times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

from .errors import CodesignError, MissingParameter, NonFiniteValue, NonPositiveVolume

PROVENANCES = ("llm_proposal", "llm_refinement", "fixture")
RESULT_STATUSES = ("ok", "reward_parse_error", "runtime_error", "timeout", "nonfinite")
RUN_STATUSES = ("coarse", "fine", "done", "aborted")
REWARD_DIALECTS = ("builtin_dsl", "external_code")

# Relative slack allowed between stored efficiency and fitness/volume.
EFFICIENCY_REL_TOL = 1e-12


class SchemaError(CodesignError):
    """A morphology schema violates its own invariants."""


class UnknownParameter(CodesignError):
    """A value map contains a name the schema does not declare."""


@dataclass(frozen=True)
class ParamSpec:
    name: str
    lower: float
    upper: float
    unit: str = ""


@dataclass(frozen=True)
class MorphologySchema:
    """Named, bounded design parameters plus a structure template.

    The template carries one ``{name}`` placeholder per parameter; rendering
    and masking both key off those placeholders.
    """

    name: str
    params: tuple[ParamSpec, ...]
    structure_template: str

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate parameter names in schema {self.name!r}")
        for p in self.params:
            if not (math.isfinite(p.lower) and math.isfinite(p.upper)):
                raise SchemaError(f"non-finite bounds for parameter {p.name!r}")
            if not p.lower < p.upper:
                raise SchemaError(f"parameter {p.name!r} requires lower < upper")
        for name in names:
            if "{%s}" % name not in self.structure_template:
                raise SchemaError(f"template lacks placeholder for {name!r}")
        extra = _template_placeholders(self.structure_template) - set(names)
        if extra:
            raise SchemaError(f"template placeholders without parameters: {sorted(extra)}")

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    def param(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise UnknownParameter(name)


def _template_placeholders(template: str) -> set[str]:
    import re

    return set(re.findall(r"\{([A-Za-z_][A-Za-z0-9_]*)\}", template))


@dataclass(frozen=True)
class MorphologyCandidate:
    id: str
    values: dict[str, float]
    provenance: str
    parent_id: Optional[str] = None
    clamped: tuple[str, ...] = ()

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise CodesignError(f"unknown provenance {self.provenance!r}")


@dataclass(frozen=True)
class RewardCandidate:
    id: str
    source: str
    dialect: str
    provenance: str
    parent_id: Optional[str] = None

    def __post_init__(self):
        if not self.source.strip():
            raise CodesignError("reward source must be non-empty")
        if self.dialect not in REWARD_DIALECTS:
            raise CodesignError(f"unknown dialect {self.dialect!r}")
        if self.provenance not in PROVENANCES:
            raise CodesignError(f"unknown provenance {self.provenance!r}")


def validate_morphology(
    schema: MorphologySchema, values: dict[str, float]
) -> tuple[dict[str, float], list[str]]:
    """Check a proposed value map against the schema.

    Returns the admitted map (out-of-range values clamped to their bounds)
    and a list of soft violations naming each clamped parameter. A missing
    parameter is a hard error; so is any non-finite value.
    """
    unknown = set(values) - set(schema.param_names)
    if unknown:
        raise UnknownParameter(f"not in schema {schema.name!r}: {sorted(unknown)}")
    missing = [n for n in schema.param_names if n not in values]
    if missing:
        raise MissingParameter(missing)
    clamped: dict[str, float] = {}
    violations: list[str] = []
    for p in schema.params:
        v = float(values[p.name])
        if not math.isfinite(v):
            raise NonFiniteValue(f"parameter {p.name!r} is {v!r}")
        if v < p.lower:
            violations.append(f"clamped {p.name}: {v!r} -> {p.lower!r}")
            v = p.lower
        elif v > p.upper:
            violations.append(f"clamped {p.name}: {v!r} -> {p.upper!r}")
            v = p.upper
        clamped[p.name] = v
    return clamped, violations


def efficiency(fitness: float, volume: float) -> float:
    """Fitness per unit volume; the selection objective everywhere."""
    if not (math.isfinite(fitness) and math.isfinite(volume)):
        raise NonFiniteValue(f"fitness={fitness!r} volume={volume!r}")
    if volume <= 0.0:
        raise NonPositiveVolume(f"volume={volume!r}")
    return fitness / volume


@dataclass(frozen=True)
class EvaluationResult:
    """Outcome of training and measuring one (morphology, reward) pair.

    ``status == "ok"`` iff fitness, volume and efficiency are all present and
    finite; non-ok results carry none of them and are never selectable.
    """

    pair: tuple[str, str]
    status: str
    fitness: Optional[float] = None
    volume: Optional[float] = None
    efficiency: Optional[float] = None
    train_return: Optional[float] = None
    wall_time: float = 0.0
    seed: int = 0
    detail: Optional[str] = None

    def __post_init__(self):
        if self.status not in RESULT_STATUSES:
            raise CodesignError(f"unknown status {self.status!r}")
        if self.status == "ok":
            for name in ("fitness", "volume", "efficiency"):
                v = getattr(self, name)
                if v is None or not math.isfinite(v):
                    raise CodesignError(f"ok result requires finite {name}, got {v!r}")
            expected = self.fitness / self.volume
            if abs(self.efficiency - expected) > EFFICIENCY_REL_TOL * max(1.0, abs(expected)):
                raise CodesignError("efficiency inconsistent with fitness/volume")
        else:
            if self.efficiency is not None:
                raise CodesignError("non-ok result must not carry an efficiency")

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def efficiency_key(self) -> float:
        """Sentinel ordering key: -inf for non-ok results."""
        return self.efficiency if self.ok else float("-inf")


def make_result(
    morphology_id: str,
    reward_id: str,
    status: str,
    fitness: Optional[float] = None,
    volume: Optional[float] = None,
    train_return: Optional[float] = None,
    wall_time: float = 0.0,
    seed: int = 0,
    detail: Optional[str] = None,
) -> EvaluationResult:
    """Build an EvaluationResult, deriving efficiency for ok results and
    downgrading to ``nonfinite`` when a claimed-ok result is not finite."""
    eff = None
    if status == "ok":
        if (
            fitness is None
            or volume is None
            or not (math.isfinite(fitness) and math.isfinite(volume))
        ):
            status, detail = "nonfinite", detail or "non-finite fitness or volume"
            fitness = volume = train_return = None
        elif volume <= 0.0:
            status, detail = "runtime_error", detail or f"non-positive volume {volume!r}"
            fitness = volume = train_return = None
        else:
            eff = efficiency(fitness, volume)
            if not math.isfinite(eff):
                status, detail, eff = "nonfinite", "non-finite efficiency", None
                fitness = volume = train_return = None
    else:
        fitness = volume = train_return = None
    return EvaluationResult(
        pair=(morphology_id, reward_id),
        status=status,
        fitness=fitness,
        volume=volume,
        efficiency=eff,
        train_return=train_return,
        wall_time=wall_time,
        seed=seed,
        detail=detail,
    )


@dataclass(frozen=True)
class FineStep:
    """One refinement attempt inside a pair's fine stage."""

    iteration: int
    phase: str  # "morphology" | "reward"
    candidate_id: str
    result: EvaluationResult
    accepted: bool

    def __post_init__(self):
        if self.phase not in ("morphology", "reward"):
            raise CodesignError(f"unknown phase {self.phase!r}")


@dataclass(frozen=True)
class CemSettings:
    population: int = 32
    elites: int = 8
    iterations: int = 20

    def __post_init__(self):
        if not 0 < self.elites < self.population:
            raise CodesignError("cem requires 0 < elites < population")
        if self.iterations < 1:
            raise CodesignError("cem requires iterations >= 1")


@dataclass(frozen=True)
class EvaluatorSpec:
    """Backend that maps a (morphology, reward) pair to fitness and volume."""

    kind: str = "builtin"  # "builtin" | "subprocess"
    workers: int = 1
    cem: CemSettings = field(default_factory=CemSettings)
    argv: tuple[str, ...] = ()
    timeout: float = 1800.0

    def __post_init__(self):
        if self.kind not in ("builtin", "subprocess"):
            raise CodesignError(f"unknown evaluator kind {self.kind!r}")
        if self.kind == "subprocess" and not self.argv:
            raise CodesignError("subprocess evaluator requires argv")
        if self.workers < 1:
            raise CodesignError("workers must be >= 1")
        if self.timeout <= 0:
            raise CodesignError("timeout must be > 0")


@dataclass(frozen=True)
class ProviderSpec:
    kind: str  # "scripted_mock" | "http_chat"
    fixture_path: Optional[str] = None
    endpoint: Optional[str] = None
    model: Optional[str] = None
    api_key_env: str = "CODESIGN_LLM_API_KEY"

    def __post_init__(self):
        if self.kind not in ("scripted_mock", "http_chat"):
            raise CodesignError(f"unknown provider kind {self.kind!r}")
        if self.kind == "scripted_mock" and not self.fixture_path:
            raise CodesignError("scripted_mock provider requires fixture_path")
        if self.kind == "http_chat" and not (self.endpoint and self.model):
            raise CodesignError("http_chat provider requires endpoint and model")


@dataclass(frozen=True)
class RunConfig:
    """Knobs for one engine run. The search-breadth defaults (25 morphologies,
    5 rewards, top 5%) are the reference operating point for this pipeline."""

    n_morphologies: int = 25
    n_rewards: int = 5
    top_k_fraction: float = 0.05
    fine_max_iterations: int = 10
    seed: int = 0
    evaluator: EvaluatorSpec = field(default_factory=EvaluatorSpec)
    llm: ProviderSpec = field(default_factory=lambda: ProviderSpec(kind="scripted_mock", fixture_path="fixture.json"))
    training_budget: int = 500_000
    retrain_budget: int = 1_000_000
    proposal_temperature: float = 1.0
    refine_temperature: float = 0.3
    max_retries: int = 2
    context_budget: int = 24_000

    def __post_init__(self):
        if self.n_morphologies < 1 or self.n_rewards < 1:
            raise CodesignError("need at least one morphology and one reward")
        if not 0.0 < self.top_k_fraction <= 1.0:
            raise CodesignError("top_k_fraction must be in (0, 1]")
        if self.fine_max_iterations < 0:
            raise CodesignError("fine_max_iterations must be >= 0")
        if self.max_retries < 0:
            raise CodesignError("max_retries must be >= 0")


@dataclass
class RunState:
    """Archive of everything a run has produced. Mutated only by the single
    coordinating sequence; the stored values themselves are immutable."""

    config: RunConfig
    schema: MorphologySchema
    morphologies: list[MorphologyCandidate] = field(default_factory=list)
    rewards: list[RewardCandidate] = field(default_factory=list)
    grid: dict[tuple[str, str], EvaluationResult] = field(default_factory=dict)
    selected: list[tuple[str, str]] = field(default_factory=list)
    fine_trajectories: dict[tuple[str, str], list[FineStep]] = field(default_factory=dict)
    fine_candidates: dict[str, object] = field(default_factory=dict)
    status: str = "coarse"

    def candidate(self, cid: str):
        for m in self.morphologies:
            if m.id == cid:
                return m
        for r in self.rewards:
            if r.id == cid:
                return r
        if cid in self.fine_candidates:
            return self.fine_candidates[cid]
        raise KeyError(cid)

    def all_candidate_ids(self) -> set[str]:
        ids = {m.id for m in self.morphologies} | {r.id for r in self.rewards}
        ids |= set(self.fine_candidates)
        return ids

    def with_status(self, status: str) -> "RunState":
        if status not in RUN_STATUSES:
            raise CodesignError(f"unknown run status {status!r}")
        self.status = status
        return self


__all__ = [
    "CemSettings",
    "EvaluationResult",
    "EvaluatorSpec",
    "FineStep",
    "MorphologyCandidate",
    "MorphologySchema",
    "ParamSpec",
    "ProviderSpec",
    "RewardCandidate",
    "RunConfig",
    "RunState",
    "SchemaError",
    "UnknownParameter",
    "efficiency",
    "make_result",
    "validate_morphology",
    "replace",
]
