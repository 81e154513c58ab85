"""Built-in desk-scale evaluator: a planar segmented crawler with
deterministic 1-D dynamics, trained by cross-entropy search over open-loop
sinusoidal controllers.

The crawler is three cylindrical segments on a line. Actuator commands
produce forward thrust proportional to segment length; motion is opposed by
linear drag and a smoothed Coulomb friction term, so a reward can favour
thrift, oscillation or raw speed and produce genuinely different trained
gaits. Identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rewardlang
from .errors import CodesignError
from .model import (
    CemSettings,
    EvaluationResult,
    MorphologyCandidate,
    MorphologySchema,
    ParamSpec,
    RewardCandidate,
    make_result,
)
from .prompts import TaskContext

N_SEGMENTS = 3

STRUCTURE_TEMPLATE = """\
crawler:
  segments:
    - segment: { length: {l1}, radius: {r1} }
    - segment: { length: {l2}, radius: {r2} }
    - segment: { length: {l3}, radius: {r3} }
  material: { density: 1000.0 }
  actuators: [seg1, seg2, seg3]
"""

CRAWLER_SCHEMA = MorphologySchema(
    name="crawler",
    params=(
        ParamSpec("l1", 0.05, 1.0, "m"),
        ParamSpec("l2", 0.05, 1.0, "m"),
        ParamSpec("l3", 0.05, 1.0, "m"),
        ParamSpec("r1", 0.01, 0.2, "m"),
        ParamSpec("r2", 0.01, 0.2, "m"),
        ParamSpec("r3", 0.01, 0.2, "m"),
    ),
    structure_template=STRUCTURE_TEMPLATE,
)

# State variables a reward expression may reference.
STATE_VARS = ("t", "x", "v", "dist", "speed", "ctrl", "u1", "u2", "u3")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    horizon: float = 10.0
    density: float = 1000.0
    gear: float = 20.0
    drag: float = 0.8
    friction: float = 0.1
    gravity: float = 9.81
    v_smooth: float = 0.01

    @property
    def n_steps(self) -> int:
        return round(self.horizon / self.dt)


@dataclass(frozen=True)
class CemConfig:
    population: int = 32
    elites: int = 8
    iterations: int = 20
    seed: int = 0
    init_std_frac: float = 0.25
    std_floor_frac: float = 0.01

    def __post_init__(self):
        if not 0 < self.elites < self.population:
            raise CodesignError("cem requires 0 < elites < population")
        if self.iterations < 1:
            raise CodesignError("cem requires iterations >= 1")


# Controller vector layout: [A1, f1, phi1, A2, f2, phi2, A3, f3, phi3].
_PHASE_UPPER = np.nextafter(2.0 * np.pi, 0.0)
CTRL_LOWER = np.array([0.0, 0.1, 0.0] * N_SEGMENTS)
CTRL_UPPER = np.array([1.0, 3.0, _PHASE_UPPER] * N_SEGMENTS)


class NonFiniteState(CodesignError):
    """Integration produced a non-finite position or velocity."""


def volume(values: dict[str, float]) -> float:
    """Total cylinder volume in m^3, summed segment by segment."""
    total = 0.0
    for i in range(1, N_SEGMENTS + 1):
        r = values[f"r{i}"]
        l = values[f"l{i}"]
        total += math.pi * r * r * l
    return total


def rollout(
    values: dict[str, float],
    ctrl: np.ndarray,
    cfg: SimConfig = SimConfig(),
    v0: float = 0.0,
) -> dict[str, np.ndarray]:
    """Integrate the dynamics and return per-step state arrays.

    Step k applies commands sampled at t = k*dt, then advances velocity and
    position with semi-implicit Euler; the recorded state is the post-step
    one with t = (k+1)*dt.
    """
    lengths = np.array([values[f"l{i}"] for i in range(1, N_SEGMENTS + 1)])
    mass = cfg.density * volume(values)
    n = cfg.n_steps
    t_cmd = np.arange(n) * cfg.dt
    amps = ctrl[0::3].reshape(-1, 1)
    freqs = ctrl[1::3].reshape(-1, 1)
    phases = ctrl[2::3].reshape(-1, 1)
    u = np.clip(amps * np.sin(2.0 * np.pi * freqs * t_cmd + phases), -1.0, 1.0)
    thrust = cfg.gear * (lengths @ u)

    xs = np.empty(n)
    vs = np.empty(n)
    x = 0.0
    v = float(v0)
    mu_mg = cfg.friction * mass * cfg.gravity
    for k in range(n):
        a = (thrust[k] - cfg.drag * mass * v - mu_mg * math.tanh(v / cfg.v_smooth)) / mass
        v += a * cfg.dt
        x += v * cfg.dt
        vs[k] = v
        xs[k] = x
    if not (math.isfinite(x) and math.isfinite(v)):
        raise NonFiniteState(f"x={x!r} v={v!r}")
    return {
        "t": (np.arange(n) + 1) * cfg.dt,
        "x": xs,
        "v": vs,
        "dist": xs,
        "speed": np.abs(vs),
        "ctrl": np.sum(u * u, axis=0),
        "u1": u[0],
        "u2": u[1],
        "u3": u[2],
    }


def simulate(
    values: dict[str, float],
    ctrl: np.ndarray,
    reward: rewardlang.Node,
    cfg: SimConfig = SimConfig(),
) -> tuple[float, float]:
    """Run one episode; returns (reward integral, net displacement)."""
    states = rollout(values, ctrl, cfg)
    rewards = rewardlang.evaluate_series(reward, states)
    rewards = np.broadcast_to(np.asarray(rewards, dtype=np.float64), (cfg.n_steps,))
    ret = float(np.sum(rewards) * cfg.dt)
    if not math.isfinite(ret):
        raise rewardlang.EvalError(f"non-finite return {ret!r}")
    return ret, float(states["x"][-1])


def train_cem(
    values: dict[str, float],
    reward: rewardlang.Node,
    cem: CemConfig,
    sim: SimConfig = SimConfig(),
    on_iteration=None,
) -> tuple[np.ndarray, float]:
    """Cross-entropy search over controller space, scored by episode return.

    Individuals whose episode fails (non-finite reward) score -inf; training
    carries on regardless. Fully determined by cem.seed.
    """
    rng = np.random.default_rng(cem.seed)
    span = CTRL_UPPER - CTRL_LOWER
    mean = (CTRL_LOWER + CTRL_UPPER) / 2.0
    std = cem.init_std_frac * span
    floor = cem.std_floor_frac * span

    best_ctrl = mean.copy()
    best_return = -np.inf
    for it in range(cem.iterations):
        pop = rng.normal(mean, std, size=(cem.population, mean.size))
        pop = np.clip(pop, CTRL_LOWER, CTRL_UPPER)
        scores = np.empty(cem.population)
        for i in range(cem.population):
            try:
                scores[i], _ = simulate(values, pop[i], reward, sim)
            except (rewardlang.RewardLangError, NonFiniteState):
                scores[i] = -np.inf
        if on_iteration is not None:
            on_iteration(it, scores.copy())
        order = np.argsort(-scores, kind="stable")
        if scores[order[0]] > best_return:
            best_return = float(scores[order[0]])
            best_ctrl = pop[order[0]].copy()
        elite = pop[order[: cem.elites]]
        mean = elite.mean(axis=0)
        std = np.maximum(elite.std(axis=0), floor)
    return best_ctrl, best_return


def evaluate_builtin(
    morphology: MorphologyCandidate,
    reward: RewardCandidate,
    cem: CemConfig,
    sim: SimConfig = SimConfig(),
) -> EvaluationResult:
    """Train a controller for the pair and measure fitness and volume.

    All failure modes are encoded in the result status; this never raises
    for a bad candidate.
    """
    if reward.dialect != "builtin_dsl":
        raise CodesignError(f"builtin evaluator got dialect {reward.dialect!r}")
    started = time.perf_counter()

    def finish(status, fitness=None, vol=None, train_return=None, detail=None):
        return make_result(
            morphology.id,
            reward.id,
            status,
            fitness=fitness,
            volume=vol,
            train_return=train_return,
            wall_time=time.perf_counter() - started,
            seed=cem.seed,
            detail=detail,
        )

    try:
        ast = rewardlang.parse(reward.source)
    except rewardlang.RewardLangError as exc:
        return finish("reward_parse_error", detail=str(exc))
    unknown = rewardlang.free_vars(ast) - set(STATE_VARS)
    if unknown:
        return finish("reward_parse_error", detail=f"unknown state variables: {sorted(unknown)}")

    try:
        best_ctrl, best_return = train_cem(morphology.values, ast, cem, sim)
        _, fitness = simulate(morphology.values, best_ctrl, ast, sim)
    except (rewardlang.RewardLangError, NonFiniteState) as exc:
        return finish("nonfinite", detail=str(exc))
    except Exception as exc:  # defensive: anything else is a runtime error
        return finish("runtime_error", detail=f"{type(exc).__name__}: {exc}")
    return finish("ok", fitness=fitness, vol=volume(morphology.values), train_return=best_return)


def _evaluate_job(args):
    morphology, reward, cem, sim = args
    return evaluate_builtin(morphology, reward, cem, sim)


class BuiltinEvaluator:
    """Evaluator backend hosting the crawler in-process.

    Evaluations are independent; with workers > 1 they run in a process
    pool. Results are keyed, so completion order never matters.
    """

    kind = "builtin"

    def __init__(self, cem: CemSettings = CemSettings(), workers: int = 1, sim: SimConfig = SimConfig()):
        self.cem = cem
        self.workers = workers
        self.sim = sim
        self.schema = CRAWLER_SCHEMA
        self.reward_dialect = "builtin_dsl"

    def _cem_config(self, seed: int) -> CemConfig:
        return CemConfig(
            population=self.cem.population,
            elites=self.cem.elites,
            iterations=self.cem.iterations,
            seed=seed,
        )

    def evaluate(self, morphology, reward, seed: int) -> EvaluationResult:
        return evaluate_builtin(morphology, reward, self._cem_config(seed), self.sim)

    def evaluate_many(self, jobs, on_result) -> None:
        """jobs: iterable of (morphology, reward, seed); on_result is called
        with each EvaluationResult as it completes."""
        jobs = list(jobs)
        if self.workers <= 1 or len(jobs) <= 1:
            for morphology, reward, seed in jobs:
                on_result(self.evaluate(morphology, reward, seed))
            return
        packed = [(m, r, self._cem_config(s), self.sim) for m, r, s in jobs]
        with ProcessPoolExecutor(max_workers=self.workers) as pool:
            for result in pool.map(_evaluate_job, packed):
                on_result(result)

    def close(self) -> None:
        pass


TASK_DESCRIPTION = (
    "Design a three-segment planar crawler that travels as far as possible "
    "along the ground in a 10 second episode, using as little material as "
    "possible. The score is net displacement divided by body volume, so "
    "slender effective bodies beat bulky ones."
)

ENVIRONMENT_SOURCE = """\
# Planar crawler environment interface.
#
# Episode: 1000 steps of 0.01 s. Three actuators drive the segments with
# commands in [-1, 1]; thrust scales with segment length. Motion is opposed
# by linear drag and smoothed Coulomb friction.
#
# Training maximizes the integral over time of the expression you provide.
# The expression is re-evaluated every step against these state variables:
#   t      time since episode start [s]
#   x      body position [m]
#   v      body velocity [m/s]
#   dist   displacement since start [m]
#   speed  |v| [m/s]
#   ctrl   sum of squared actuator commands (effort, dimensionless)
#   u1 u2 u3   individual actuator commands in [-1, 1]
#
# Allowed syntax: numbers, the variables above, + - * /, unary minus,
# parentheses, and abs(a), min(a,b), max(a,b), exp(a), tanh(a), sqrt(a),
# clamp(a, lo, hi).
"""


def output_format(schema: MorphologySchema = CRAWLER_SCHEMA) -> str:
    lines = [
        "Reply with exactly one fenced code block containing one line per "
        "parameter, in this order:",
        "```",
    ]
    for p in schema.params:
        unit = f" {p.unit}" if p.unit else ""
        lines.append(f"{p.name}: <number between {p.lower} and {p.upper}{unit}>")
    lines.append("```")
    return "\n".join(lines)


def default_task_context() -> TaskContext:
    return TaskContext(
        task_description=TASK_DESCRIPTION,
        environment_source=ENVIRONMENT_SOURCE,
        structure_template=CRAWLER_SCHEMA.structure_template,
        output_format=output_format(),
    )
