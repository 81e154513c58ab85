"""Compilation and sandboxed evaluation of generated reward code.

A reward is a Python expression over the environment's observation fields
plus math primitives. It runs with no builtins, so generated code cannot
import, open files or reach attributes outside the provided names.
"""

from __future__ import annotations

import math


class RewardCompileError(ValueError):
    pass


class RewardRuntimeError(RuntimeError):
    pass


_MATH_NAMES = {
    "abs": abs,
    "min": min,
    "max": max,
    "exp": math.exp,
    "tanh": math.tanh,
    "sqrt": math.sqrt,
    "log": math.log,
    "sin": math.sin,
    "cos": math.cos,
    "pi": math.pi,
    "clamp": lambda x, lo, hi: min(max(x, lo), hi),
}


class RewardFn:
    """One compiled reward expression bound to a variable whitelist."""

    def __init__(self, source: str, allowed_vars: tuple[str, ...]):
        self.source = source
        self.allowed = set(allowed_vars) | set(_MATH_NAMES)
        try:
            self.code = compile(source, "<reward>", "eval")
        except SyntaxError as exc:
            raise RewardCompileError(str(exc)) from None
        unknown = set(self.code.co_names) - self.allowed
        if unknown:
            raise RewardCompileError(f"unknown names in reward: {sorted(unknown)}")

    def __call__(self, state: dict[str, float]) -> float:
        namespace = {"__builtins__": {}}
        namespace.update(_MATH_NAMES)
        namespace.update(state)
        try:
            value = float(eval(self.code, namespace))  # noqa: S307 - sandboxed
        except Exception as exc:
            raise RewardRuntimeError(f"{type(exc).__name__}: {exc}") from None
        if not math.isfinite(value):
            raise RewardRuntimeError(f"non-finite reward {value!r}")
        return value
