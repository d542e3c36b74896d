"""Expression trees for scalar coefficient fields.

An expression is an immutable tree over the variables ``x1..xd`` built from
real constants, the unary operations ``-``, ``sin``, ``cos``, ``exp``,
``tanh``, the binary operations ``+ - * /``, and integer powers ``e^n`` with
``n >= 0``.  Trees are frozen dataclasses: they hash and compare
structurally, and they are safe to share between threads because nothing
mutates them after construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from ..errors import EvaluationError

__all__ = [
    "Expression",
    "Const",
    "Var",
    "Unary",
    "Binary",
    "Power",
    "UNARY_OPS",
    "BINARY_OPS",
    "evaluate",
    "differentiate",
    "simplify",
    "to_text",
    "node_count",
    "compile_expression",
]

UNARY_OPS = ("neg", "sin", "cos", "exp", "tanh")
BINARY_OPS = ("add", "sub", "mul", "div")


class Expression:
    """Base class for AST nodes."""

    __slots__ = ()

    def __str__(self) -> str:
        return to_text(self)


@dataclass(frozen=True, slots=True)
class Const(Expression):
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))


@dataclass(frozen=True, slots=True)
class Var(Expression):
    index: int  # 1-based

    def __post_init__(self):
        if self.index < 1:
            raise ValueError(f"variable index must be >= 1, got {self.index}")


@dataclass(frozen=True, slots=True)
class Unary(Expression):
    op: str
    arg: Expression

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ValueError(f"unknown unary op {self.op!r}")


@dataclass(frozen=True, slots=True)
class Binary(Expression):
    op: str
    lhs: Expression
    rhs: Expression

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ValueError(f"unknown binary op {self.op!r}")


@dataclass(frozen=True, slots=True)
class Power(Expression):
    base: Expression
    exponent: int

    def __post_init__(self):
        if not isinstance(self.exponent, int) or isinstance(self.exponent, bool):
            raise ValueError("power exponent must be a stored integer")
        if self.exponent < 0:
            raise ValueError("power exponent must be non-negative")


_UNARY_FN = {
    "neg": lambda v: -v,
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
    "tanh": math.tanh,
}


def evaluate(expr: Expression, point: Sequence[float]) -> float:
    """Evaluate ``expr`` at a finite point, returning a finite real.

    Raises :class:`EvaluationError` naming the offending subexpression when
    the result is non-finite (division by zero, overflow) or when a variable
    index exceeds the point dimension.
    """
    pt = [float(v) for v in point]
    for v in pt:
        if not math.isfinite(v):
            raise EvaluationError("evaluation point must be finite")
    return _eval(expr, pt)


def _eval(expr: Expression, pt: list) -> float:
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, Var):
        if expr.index > len(pt):
            raise EvaluationError(
                f"variable x{expr.index} out of range for a {len(pt)}-dimensional point"
            )
        return pt[expr.index - 1]
    if isinstance(expr, Unary):
        v = _eval(expr.arg, pt)
        try:
            out = _UNARY_FN[expr.op](v)
        except (OverflowError, ValueError):
            raise EvaluationError(f"non-finite value from '{to_text(expr)}'") from None
        return _check_finite(out, expr)
    if isinstance(expr, Binary):
        a = _eval(expr.lhs, pt)
        b = _eval(expr.rhs, pt)
        if expr.op == "div" and b == 0.0:
            raise EvaluationError(f"division by zero in '{to_text(expr)}'")
        try:
            out = _BINARY_FN[expr.op](a, b)
        except OverflowError:
            raise EvaluationError(f"non-finite value from '{to_text(expr)}'") from None
        return _check_finite(out, expr)
    if isinstance(expr, Power):
        v = _eval(expr.base, pt)
        try:
            out = v**expr.exponent
        except OverflowError:
            raise EvaluationError(f"non-finite value from '{to_text(expr)}'") from None
        return _check_finite(out, expr)
    raise TypeError(f"not an expression node: {expr!r}")


_BINARY_FN = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
}


def _check_finite(value: float, expr: Expression) -> float:
    if not math.isfinite(value):
        raise EvaluationError(f"non-finite value from '{to_text(expr)}'")
    return value


def differentiate(expr: Expression, index: int) -> Expression:
    """Symbolic partial derivative with respect to ``x{index}``.

    Exact chain/product/quotient rules; tanh'(u) = 1 - tanh(u)^2.  The result
    is not simplified; compose with :func:`simplify` for tidy output.
    """
    if index < 1:
        raise ValueError("derivative index must be >= 1")
    if isinstance(expr, Const):
        return Const(0.0)
    if isinstance(expr, Var):
        return Const(1.0 if expr.index == index else 0.0)
    if isinstance(expr, Unary):
        d = differentiate(expr.arg, index)
        a = expr.arg
        if expr.op == "neg":
            return Unary("neg", d)
        if expr.op == "sin":
            return Binary("mul", Unary("cos", a), d)
        if expr.op == "cos":
            return Unary("neg", Binary("mul", Unary("sin", a), d))
        if expr.op == "exp":
            return Binary("mul", Unary("exp", a), d)
        # tanh
        return Binary(
            "mul",
            Binary("sub", Const(1.0), Power(Unary("tanh", a), 2)),
            d,
        )
    if isinstance(expr, Binary):
        da = differentiate(expr.lhs, index)
        db = differentiate(expr.rhs, index)
        a, b = expr.lhs, expr.rhs
        if expr.op == "add":
            return Binary("add", da, db)
        if expr.op == "sub":
            return Binary("sub", da, db)
        if expr.op == "mul":
            return Binary("add", Binary("mul", da, b), Binary("mul", a, db))
        # quotient rule
        num = Binary("sub", Binary("mul", da, b), Binary("mul", a, db))
        return Binary("div", num, Power(b, 2))
    if isinstance(expr, Power):
        if expr.exponent == 0:
            return Const(0.0)
        db = differentiate(expr.base, index)
        return Binary(
            "mul",
            Binary("mul", Const(float(expr.exponent)), Power(expr.base, expr.exponent - 1)),
            db,
        )
    raise TypeError(f"not an expression node: {expr!r}")


def simplify(expr: Expression) -> Expression:
    """Constant folding and 0/1 identities, applied bottom-up.

    Idempotent, and evaluation-equivalent to the input at every finite point
    where both sides are defined.  Deliberately not a CAS: no factoring, no
    trigonometric identities.
    """
    if isinstance(expr, (Const, Var)):
        return expr
    if isinstance(expr, Unary):
        return _simp_unary(expr.op, simplify(expr.arg))
    if isinstance(expr, Binary):
        return _simp_binary(expr.op, simplify(expr.lhs), simplify(expr.rhs))
    if isinstance(expr, Power):
        return _simp_power(simplify(expr.base), expr.exponent)
    raise TypeError(f"not an expression node: {expr!r}")


def _simp_unary(op: str, a: Expression) -> Expression:
    if op == "neg":
        if isinstance(a, Const):
            return Const(-a.value)
        if isinstance(a, Unary) and a.op == "neg":
            return a.arg
        return Unary("neg", a)
    if isinstance(a, Const):
        try:
            v = _UNARY_FN[op](a.value)
        except (OverflowError, ValueError):
            return Unary(op, a)
        if math.isfinite(v):
            return Const(v)
    return Unary(op, a)


def _is_const(e: Expression, v: float) -> bool:
    return isinstance(e, Const) and e.value == v


def _simp_binary(op: str, a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        if not (op == "div" and b.value == 0.0):
            try:
                v = _BINARY_FN[op](a.value, b.value)
            except OverflowError:
                v = math.inf
            if math.isfinite(v):
                return Const(v)
    if op == "add":
        if _is_const(a, 0.0):
            return b
        if _is_const(b, 0.0):
            return a
    elif op == "sub":
        if _is_const(b, 0.0):
            return a
        if _is_const(a, 0.0):
            return _simp_unary("neg", b)
    elif op == "mul":
        if _is_const(a, 0.0) or _is_const(b, 0.0):
            return Const(0.0)
        if _is_const(a, 1.0):
            return b
        if _is_const(b, 1.0):
            return a
    elif op == "div":
        if _is_const(a, 0.0):
            return Const(0.0)
        if _is_const(b, 1.0):
            return a
    return Binary(op, a, b)


def _simp_power(base: Expression, n: int) -> Expression:
    if n == 0:
        return Const(1.0)
    if n == 1:
        return base
    if isinstance(base, Const):
        try:
            v = base.value**n
        except OverflowError:
            return Power(base, n)
        if math.isfinite(v):
            return Const(v)
    return Power(base, n)


# Pretty-printer precedence levels.  A child is parenthesised when its level
# is below what its slot requires; right operands of left-associative binary
# operators require one level more than the operator itself.
_LEVEL_ADD = 1
_LEVEL_NEG = 2
_LEVEL_MUL = 3
_LEVEL_POW = 4
_LEVEL_ATOM = 5

_BINARY_SYMBOL = {"add": " + ", "sub": " - ", "mul": "*", "div": "/"}
_BINARY_LEVEL = {"add": _LEVEL_ADD, "sub": _LEVEL_ADD, "mul": _LEVEL_MUL, "div": _LEVEL_MUL}


def to_text(expr: Expression) -> str:
    """Render an expression in the DSL syntax; re-parsing is a fixed point."""
    return _fmt(expr, 0)


def _level(expr: Expression) -> int:
    if isinstance(expr, Binary):
        return _BINARY_LEVEL[expr.op]
    if isinstance(expr, Unary):
        return _LEVEL_NEG if expr.op == "neg" else _LEVEL_ATOM
    if isinstance(expr, Power):
        return _LEVEL_POW
    if isinstance(expr, Const) and expr.value < 0:
        return _LEVEL_NEG
    return _LEVEL_ATOM


def _fmt(expr: Expression, slot: int) -> str:
    if isinstance(expr, Const):
        text = _fmt_number(expr.value)
    elif isinstance(expr, Var):
        text = f"x{expr.index}"
    elif isinstance(expr, Unary):
        if expr.op == "neg":
            text = "-" + _fmt(expr.arg, _LEVEL_NEG)
        else:
            text = f"{expr.op}({_fmt(expr.arg, 0)})"
    elif isinstance(expr, Binary):
        lvl = _BINARY_LEVEL[expr.op]
        text = _fmt(expr.lhs, lvl) + _BINARY_SYMBOL[expr.op] + _fmt(expr.rhs, lvl + 1)
    elif isinstance(expr, Power):
        text = f"{_fmt(expr.base, _LEVEL_POW)}^{expr.exponent}"
    else:
        raise TypeError(f"not an expression node: {expr!r}")
    if _level(expr) < slot:
        return f"({text})"
    return text


def _fmt_number(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def node_count(expr: Expression) -> int:
    if isinstance(expr, (Const, Var)):
        return 1
    if isinstance(expr, Unary):
        return 1 + node_count(expr.arg)
    if isinstance(expr, Binary):
        return 1 + node_count(expr.lhs) + node_count(expr.rhs)
    if isinstance(expr, Power):
        return 1 + node_count(expr.base)
    raise TypeError(f"not an expression node: {expr!r}")


# ---------------------------------------------------------------------------
# Vectorised compilation.  Expressions compile to numpy closures taking an
# array of shape (..., d) and returning shape (...,).  Non-finite values are
# not raised here: simulation code masks and counts them instead.

_NP_UNARY = {"neg": "(-{a})", "sin": "np.sin({a})", "cos": "np.cos({a})",
             "exp": "np.exp({a})", "tanh": "np.tanh({a})"}
_NP_BINARY = {"add": "({a} + {b})", "sub": "({a} - {b})",
              "mul": "({a} * {b})", "div": "({a} / {b})"}


def _np_source(expr: Expression) -> str:
    if isinstance(expr, Const):
        # parenthesised so negative literals survive the ** precedence
        return f"({expr.value!r})"
    if isinstance(expr, Var):
        return f"X[..., {expr.index - 1}]"
    if isinstance(expr, Unary):
        return _NP_UNARY[expr.op].format(a=_np_source(expr.arg))
    if isinstance(expr, Binary):
        return _NP_BINARY[expr.op].format(a=_np_source(expr.lhs), b=_np_source(expr.rhs))
    if isinstance(expr, Power):
        return f"({_np_source(expr.base)} ** {expr.exponent})"
    raise TypeError(f"not an expression node: {expr!r}")


@lru_cache(maxsize=4096)
def compile_expression(expr: Expression) -> Callable[[np.ndarray], np.ndarray]:
    """Compile to a vectorised callable: X of shape (..., d) -> values (...)."""
    src = _np_source(expr)
    raw = eval(compile(f"lambda X: {src}", "<fieldlang>", "eval"), {"np": np})

    def evaluator(X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = raw(X)
        out = np.asarray(out, dtype=np.float64)
        if out.shape != X.shape[:-1]:
            out = np.broadcast_to(out, X.shape[:-1])
        return out

    return evaluator
