"""Joint optimization of robot morphology and reward functions via an
LLM-guided coarse-to-fine search loop, with a built-in deterministic
evaluator and a wire protocol for external ones."""

from .engine import Engine, GridOutcome, RunReport, select_top_k
from .errors import CodesignError
from .model import (
    EvaluationResult,
    MorphologyCandidate,
    MorphologySchema,
    RewardCandidate,
    RunConfig,
    RunState,
    efficiency,
    validate_morphology,
)

__version__ = "0.1.0"

__all__ = [
    "CodesignError",
    "Engine",
    "EvaluationResult",
    "GridOutcome",
    "MorphologyCandidate",
    "MorphologySchema",
    "RewardCandidate",
    "RunConfig",
    "RunReport",
    "RunState",
    "efficiency",
    "select_top_k",
    "validate_morphology",
    "__version__",
]
