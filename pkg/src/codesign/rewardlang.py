"""Arithmetic expression language for built-in reward functions.

A reward is a single expression over named state variables with the usual
operators (unary minus, ``+ - * /``, parentheses) and a fixed call set:
``abs, min, max, exp, tanh, sqrt, clamp``. Precedence is unary minus over
``* /`` over ``+ -``, all left associative. The language is deliberately
closed: no conditionals, no loops, no state, so evaluation is deterministic
and sandbox-free.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import CodesignError


class RewardLangError(CodesignError):
    pass


class ExprSyntaxError(RewardLangError):
    """Malformed source; carries the character position of the fault."""

    def __init__(self, message: str, pos: int):
        self.pos = pos
        super().__init__(f"{message} (at position {pos})")


class UnknownFunctionError(RewardLangError):
    pass


class ArityError(RewardLangError):
    pass


class UnboundVariableError(RewardLangError):
    pass


class EvalError(RewardLangError):
    """Division by zero, sqrt of a negative, or a non-finite intermediate."""


# ---------------------------------------------------------------- AST nodes


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Node", ...]


Node = Num | Var | Neg | BinOp | Call

FUNCTIONS: dict[str, int] = {
    "abs": 1,
    "min": 2,
    "max": 2,
    "exp": 1,
    "tanh": 1,
    "sqrt": 1,
    "clamp": 3,
}

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[+\-*/(),]))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            stripped = source[pos:].lstrip()
            if not stripped:
                break
            at = len(source) - len(stripped)
            raise ExprSyntaxError(f"unexpected character {source[at]!r}", at)
        if m.lastgroup is None:  # pure whitespace tail
            break
        tokens.append((m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def next(self):
        tok = self.peek()
        if tok is None:
            raise ExprSyntaxError("unexpected end of input", len(self.source))
        self.i += 1
        return tok

    def expect_op(self, op: str):
        tok = self.peek()
        if tok is None or tok[0] != "op" or tok[1] != op:
            pos = tok[2] if tok else len(self.source)
            raise ExprSyntaxError(f"expected {op!r}", pos)
        self.i += 1

    def parse(self) -> Node:
        node = self.expr()
        tok = self.peek()
        if tok is not None:
            raise ExprSyntaxError(f"trailing input {tok[1]!r}", tok[2])
        return node

    def expr(self) -> Node:
        node = self.term()
        while True:
            tok = self.peek()
            if tok and tok[0] == "op" and tok[1] in "+-":
                self.i += 1
                node = BinOp(tok[1], node, self.term())
            else:
                return node

    def term(self) -> Node:
        node = self.unary()
        while True:
            tok = self.peek()
            if tok and tok[0] == "op" and tok[1] in "*/":
                self.i += 1
                node = BinOp(tok[1], node, self.unary())
            else:
                return node

    def unary(self) -> Node:
        tok = self.peek()
        if tok and tok[0] == "op" and tok[1] == "-":
            self.i += 1
            return Neg(self.unary())
        return self.atom()

    def atom(self) -> Node:
        kind, text, pos = self.next()
        if kind == "num":
            value = float(text)
            if not math.isfinite(value):
                raise ExprSyntaxError(f"literal {text!r} overflows", pos)
            return Num(value)
        if kind == "name":
            nxt = self.peek()
            if nxt and nxt[0] == "op" and nxt[1] == "(":
                return self.call(text, pos)
            return Var(text)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise ExprSyntaxError(f"unexpected token {text!r}", pos)

    def call(self, func: str, pos: int) -> Node:
        if func not in FUNCTIONS:
            raise UnknownFunctionError(f"unknown function {func!r}")
        self.expect_op("(")
        args = [self.expr()]
        while True:
            tok = self.peek()
            if tok and tok[0] == "op" and tok[1] == ",":
                self.i += 1
                args.append(self.expr())
            else:
                break
        self.expect_op(")")
        if len(args) != FUNCTIONS[func]:
            raise ArityError(
                f"{func} takes {FUNCTIONS[func]} argument(s), got {len(args)}"
            )
        return Call(func, tuple(args))


def parse(source: str) -> Node:
    """Parse a reward expression; trailing garbage is an error."""
    if not source.strip():
        raise ExprSyntaxError("empty expression", 0)
    return _Parser(source).parse()


def free_vars(ast: Node) -> set[str]:
    if isinstance(ast, Num):
        return set()
    if isinstance(ast, Var):
        return {ast.name}
    if isinstance(ast, Neg):
        return free_vars(ast.arg)
    if isinstance(ast, BinOp):
        return free_vars(ast.left) | free_vars(ast.right)
    if isinstance(ast, Call):
        out: set[str] = set()
        for a in ast.args:
            out |= free_vars(a)
        return out
    raise TypeError(f"not an AST node: {ast!r}")


def to_source(ast: Node) -> str:
    """Canonical, fully parenthesized rendering; ``parse(to_source(a)) == a``."""
    if isinstance(ast, Num):
        return repr(ast.value)
    if isinstance(ast, Var):
        return ast.name
    if isinstance(ast, Neg):
        return f"(-{to_source(ast.arg)})"
    if isinstance(ast, BinOp):
        return f"({to_source(ast.left)} {ast.op} {to_source(ast.right)})"
    if isinstance(ast, Call):
        return f"{ast.func}({', '.join(to_source(a) for a in ast.args)})"
    raise TypeError(f"not an AST node: {ast!r}")


def _check_finite(value: float) -> float:
    if not math.isfinite(value):
        raise EvalError(f"non-finite intermediate {value!r}")
    return value


def evaluate(ast: Node, env: dict[str, float]) -> float:
    """Evaluate over a finite-valued environment; pure and reentrant."""
    if isinstance(ast, Num):
        return ast.value
    if isinstance(ast, Var):
        try:
            return env[ast.name]
        except KeyError:
            raise UnboundVariableError(ast.name) from None
    if isinstance(ast, Neg):
        return -evaluate(ast.arg, env)
    if isinstance(ast, BinOp):
        left = evaluate(ast.left, env)
        right = evaluate(ast.right, env)
        try:
            if ast.op == "+":
                return _check_finite(left + right)
            if ast.op == "-":
                return _check_finite(left - right)
            if ast.op == "*":
                return _check_finite(left * right)
            return _check_finite(left / right)
        except (ZeroDivisionError, OverflowError) as exc:
            raise EvalError(str(exc)) from None
    if isinstance(ast, Call):
        args = [evaluate(a, env) for a in ast.args]
        try:
            if ast.func == "abs":
                return _check_finite(abs(args[0]))
            if ast.func == "min":
                return _check_finite(min(args))
            if ast.func == "max":
                return _check_finite(max(args))
            if ast.func == "exp":
                return _check_finite(math.exp(args[0]))
            if ast.func == "tanh":
                return _check_finite(math.tanh(args[0]))
            if ast.func == "sqrt":
                return _check_finite(math.sqrt(args[0]))
            if ast.func == "clamp":
                return _check_finite(min(max(args[0], args[1]), args[2]))
        except (ValueError, OverflowError, ZeroDivisionError) as exc:
            raise EvalError(str(exc)) from None
    raise TypeError(f"not an AST node: {ast!r}")


def _check_finite_array(values: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise EvalError("non-finite intermediate in series evaluation")
    return values


def evaluate_series(ast: Node, env: dict[str, np.ndarray]) -> np.ndarray:
    """Vectorized twin of :func:`evaluate` over aligned state arrays.

    Semantics match the scalar path element-wise: any element of any
    intermediate going non-finite raises EvalError.
    """
    with np.errstate(all="ignore"):
        return _eval_series(ast, env)


def _eval_series(ast: Node, env: dict[str, np.ndarray]) -> np.ndarray:
    if isinstance(ast, Num):
        return np.float64(ast.value)
    if isinstance(ast, Var):
        try:
            return env[ast.name]
        except KeyError:
            raise UnboundVariableError(ast.name) from None
    if isinstance(ast, Neg):
        return -_eval_series(ast.arg, env)
    if isinstance(ast, BinOp):
        left = _eval_series(ast.left, env)
        right = _eval_series(ast.right, env)
        if ast.op == "+":
            return _check_finite_array(left + right)
        if ast.op == "-":
            return _check_finite_array(left - right)
        if ast.op == "*":
            return _check_finite_array(left * right)
        return _check_finite_array(np.divide(left, right))
    if isinstance(ast, Call):
        args = [_eval_series(a, env) for a in ast.args]
        if ast.func == "abs":
            return _check_finite_array(np.abs(args[0]))
        if ast.func == "min":
            return _check_finite_array(np.minimum(args[0], args[1]))
        if ast.func == "max":
            return _check_finite_array(np.maximum(args[0], args[1]))
        if ast.func == "exp":
            return _check_finite_array(np.exp(args[0]))
        if ast.func == "tanh":
            return _check_finite_array(np.tanh(args[0]))
        if ast.func == "sqrt":
            return _check_finite_array(np.sqrt(args[0]))
        if ast.func == "clamp":
            return _check_finite_array(np.minimum(np.maximum(args[0], args[1]), args[2]))
    raise TypeError(f"not an AST node: {ast!r}")
