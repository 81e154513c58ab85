"""External evaluator worker: renders morphology values into structure
files, trains a policy with soft actor-critic against generated reward
code, and reports fitness and volume over a line-delimited JSON protocol."""

from .config import SacHyperparams, WorkerConfig, load_config
from .envs import REGISTRY, PlanarCrawlerEnv, StubEnv
from .rewards import RewardCompileError, RewardFn, RewardRuntimeError
from .structure import UnresolvedMask, parse_structure, render_structure

__version__ = "0.1.0"

__all__ = [
    "REGISTRY",
    "PlanarCrawlerEnv",
    "RewardCompileError",
    "RewardFn",
    "RewardRuntimeError",
    "SacHyperparams",
    "StubEnv",
    "UnresolvedMask",
    "WorkerConfig",
    "load_config",
    "parse_structure",
    "render_structure",
    "__version__",
]
