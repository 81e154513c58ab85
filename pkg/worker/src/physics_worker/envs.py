"""Environments hosted by this worker.

``crawler`` is a planar three-body inchworm: rigid segments coupled by
compliant actuated joints, resting on ground with load-shiftable regularized
Coulomb friction. Locomotion requires coordinating joint forces with load
transfer, so the trained gait genuinely depends on the reward. ``stub`` is a
zero-dynamics environment for protocol tests.

Masked structure templates and per-environment volume formulas are defined
here; the volume formulas are artifact-defined (sum of segment cylinders for
the crawler, unit volume for the stub).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .structure import DEFAULT_TEMPLATE, parse_structure

GRAVITY = 9.81
DENSITY = 1000.0


class StubEnv:
    """Nothing moves; fitness is always zero."""

    observation_names = ("t", "v", "dist")
    action_dim = 2
    horizon = 10

    def __init__(self, params: dict[str, float]):
        self.params = params
        self.steps = 0

    def reset(self, seed: int = 0) -> np.ndarray:
        self.steps = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        return np.zeros(3)

    def state_dict(self) -> dict[str, float]:
        return {"t": self.steps * 0.01, "v": 0.0, "dist": 0.0}

    def step(self, action: np.ndarray):
        self.steps += 1
        return self.observe(), self.steps >= self.horizon

    def fitness(self) -> float:
        return 0.0


class PlanarCrawlerEnv:
    """Three rigid segments on a line with ground contact.

    Actions (all in [-1, 1]): force on the 1-2 joint, force on the 2-3
    joint, and a load shift moving normal force between the outer segments.
    Friction is regularized Coulomb per segment, so alternating grip and
    push produces net motion.
    """

    observation_names = ("gap12", "gap23", "v1", "v2", "v3", "vcm", "t", "effort")
    action_dim = 3

    DT = 0.01
    HORIZON = 400
    F_MAX = 30.0
    K_SPRING = 120.0
    C_DAMP = 4.0
    MU = 0.6
    V_SMOOTH = 0.01

    def __init__(self, params: dict[str, float]):
        self.lengths = np.array([params["l1"], params["l2"], params["l3"]])
        self.radii = np.array([params["r1"], params["r2"], params["r3"]])
        self.masses = DENSITY * math.pi * self.radii**2 * self.lengths
        self.rest = np.array([
            (self.lengths[0] + self.lengths[1]) / 2.0,
            (self.lengths[1] + self.lengths[2]) / 2.0,
        ])
        self.horizon = self.HORIZON
        self.reset()

    def reset(self, seed: int = 0) -> np.ndarray:
        self.x = np.array([0.0, self.rest[0], self.rest[0] + self.rest[1]])
        self.v = np.zeros(3)
        self.steps = 0
        self.start_cm = self._center_of_mass()
        self.last_action = np.zeros(3)
        return self.observe()

    def _center_of_mass(self) -> float:
        return float(np.dot(self.masses, self.x) / self.masses.sum())

    def observe(self) -> np.ndarray:
        gaps = np.diff(self.x) - self.rest
        vcm = float(np.dot(self.masses, self.v) / self.masses.sum())
        return np.array([gaps[0], gaps[1], self.v[0], self.v[1], self.v[2], vcm])

    def state_dict(self) -> dict[str, float]:
        obs = self.observe()
        return {
            "gap12": float(obs[0]),
            "gap23": float(obs[1]),
            "v1": float(obs[2]),
            "v2": float(obs[3]),
            "v3": float(obs[4]),
            "vcm": float(obs[5]),
            "t": self.steps * self.DT,
            "effort": float(np.sum(self.last_action**2)),
        }

    def step(self, action: np.ndarray):
        a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        self.last_action = a
        gaps = np.diff(self.x) - self.rest
        dv = np.diff(self.v)
        j12 = a[0] * self.F_MAX + self.K_SPRING * gaps[0] + self.C_DAMP * dv[0]
        j23 = a[1] * self.F_MAX + self.K_SPRING * gaps[1] + self.C_DAMP * dv[1]

        normals = self.masses * GRAVITY
        shift = a[2] * 0.5 * min(self.masses[0], self.masses[2]) * GRAVITY
        n1 = max(normals[0] + shift, 0.0)
        n3 = max(normals[2] - shift, 0.0)
        n = np.array([n1, normals[1], n3])
        friction = -self.MU * n * np.tanh(self.v / self.V_SMOOTH)

        force = np.array([j12, -j12 + j23, -j23]) + friction
        self.v = self.v + force / self.masses * self.DT
        self.x = self.x + self.v * self.DT
        self.steps += 1
        return self.observe(), self.steps >= self.horizon

    def fitness(self) -> float:
        return self._center_of_mass() - self.start_cm


def crawler_volume(params: dict[str, float]) -> float:
    total = 0.0
    for i in (1, 2, 3):
        total += math.pi * params[f"r{i}"] ** 2 * params[f"l{i}"]
    return total


@dataclass(frozen=True)
class EnvSpec:
    name: str
    template: str
    parse: Callable[[str], dict]
    make: Callable[[dict], object]
    volume: Callable[[dict], float]


REGISTRY: dict[str, EnvSpec] = {
    "crawler": EnvSpec(
        name="crawler",
        template=DEFAULT_TEMPLATE,
        parse=parse_structure,
        make=PlanarCrawlerEnv,
        volume=crawler_volume,
    ),
    "stub": EnvSpec(
        name="stub",
        template="stub: {}\n",
        parse=lambda document: {},
        make=StubEnv,
        volume=lambda params: 1.0,
    ),
}
