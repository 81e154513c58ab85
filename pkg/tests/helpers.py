"""Shared test helpers: fixture builders, deterministic random generators
and a fake evaluator with exactly scriptable efficiencies."""

from __future__ import annotations

import json
import random
from pathlib import Path

from codesign.crawler import CRAWLER_SCHEMA, volume
from codesign.model import MorphologySchema, make_result

REWARD_POOL = [
    "v",
    "dist",
    "v - 0.05*ctrl",
    "speed",
    "tanh(v) + 0.1*dist",
    "clamp(v, -1.0, 1.0)",
    "v + 0.2*u1*u2",
    "max(v, 0.0) - 0.02*ctrl",
    "abs(v) - 0.1*speed",
    "dist - 0.01*ctrl",
]


def random_values(rng: random.Random, schema: MorphologySchema = CRAWLER_SCHEMA):
    return {
        p.name: round(rng.uniform(p.lower, p.upper), 4) for p in schema.params
    }


def morph_response(values, prose: str = "Here is a design:") -> str:
    lines = "\n".join(f"{k}: {v}" for k, v in values.items())
    return f"{prose}\n```\n{lines}\n```"


def reward_response(source: str, prose: str = "Proposed objective:") -> str:
    return f"{prose}\n```\n{source}\n```"


def build_fixture(
    path: str | Path,
    n_morphologies: int,
    n_rewards: int,
    seed: int = 0,
    morph_refine: int = 0,
    reward_refine: int = 0,
    schema: MorphologySchema = CRAWLER_SCHEMA,
) -> dict:
    """Write a mock-provider fixture with plausible random responses."""
    rng = random.Random(seed)
    fixture = {
        "morph_propose": [
            morph_response(random_values(rng, schema)) for _ in range(n_morphologies)
        ],
        "reward_propose": [
            reward_response(rng.choice(REWARD_POOL)) for _ in range(n_rewards)
        ],
        "morph_refine": [
            morph_response(random_values(rng, schema)) for _ in range(morph_refine)
        ],
        "reward_refine": [
            reward_response(rng.choice(REWARD_POOL)) for _ in range(reward_refine)
        ],
    }
    Path(path).write_text(json.dumps(fixture, indent=2))
    return fixture


class FakeEvaluator:
    """Deterministic evaluator whose efficiency is an exact function of the
    candidate values, so tests can script improvements precisely:
    fitness = sum of parameter values + 0.001 * len(reward source)."""

    kind = "builtin"
    reward_dialect = "builtin_dsl"

    def __init__(self, schema: MorphologySchema = CRAWLER_SCHEMA):
        self.schema = schema
        self.calls = []

    # a syntactically valid source that this evaluator treats as broken
    FAILING_SOURCE = "v - v"

    def evaluate(self, morphology, reward, seed):
        self.calls.append((morphology.id, reward.id, seed))
        if reward.source.strip() == self.FAILING_SOURCE:
            return make_result(morphology.id, reward.id, "runtime_error", seed=seed,
                               detail="scripted failure")
        fitness = sum(morphology.values.values()) + 0.001 * len(reward.source)
        return make_result(
            morphology.id, reward.id, "ok",
            fitness=fitness,
            volume=volume(morphology.values),
            train_return=fitness,
            seed=seed,
        )

    def evaluate_many(self, jobs, on_result):
        for morphology, reward, seed in jobs:
            on_result(self.evaluate(morphology, reward, seed))

    def close(self):
        pass


def tiny_cem() -> dict:
    """Evaluator section for fast engine runs."""
    return {"kind": "builtin", "workers": 1,
            "cem": {"population": 4, "elites": 1, "iterations": 2}}


def write_config(
    path: str | Path,
    fixture_name: str,
    out_dir: str | None = None,
    **run_overrides,
) -> Path:
    run = {
        "n_morphologies": 3,
        "n_rewards": 2,
        "top_k_fraction": 0.34,
        "fine_max_iterations": 2,
        "seed": 11,
    }
    run.update(run_overrides)
    doc = {
        "run": run,
        "schema": "crawler",
        "evaluator": tiny_cem(),
        "llm": {"kind": "scripted_mock", "fixture": fixture_name},
    }
    if out_dir is not None:
        doc["out_dir"] = out_dir
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2))
    return path
