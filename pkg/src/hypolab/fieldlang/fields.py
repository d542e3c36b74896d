"""Vector fields and coefficient sets built from DSL expressions."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError
from .ast import Expression, compile_expression, differentiate, evaluate, simplify, to_text
from .parser import parse_expression

__all__ = [
    "VectorField",
    "CoefficientSet",
    "jacobian",
    "compile_field",
    "compile_expression_stack",
    "compile_jacobian",
    "compile_diffusion",
    "compile_diffusion_jacobians",
]


@dataclass(frozen=True, slots=True)
class VectorField:
    """A length-``dim`` tuple of component expressions."""

    dim: int
    components: tuple[Expression, ...]

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"field dimension must be >= 1, got {self.dim}")
        if len(self.components) != self.dim:
            raise ConfigError(
                f"field has {len(self.components)} components, expected {self.dim}"
            )

    @classmethod
    def from_text(cls, text: str, dim: int) -> "VectorField":
        """Parse ``dim`` comma-separated component expressions."""
        parts = [p for p in text.split(",")]
        if len(parts) != dim:
            raise ConfigError(
                f"expected {dim} comma-separated components, got {len(parts)}: {text!r}"
            )
        return cls(dim, tuple(parse_expression(p, dim) for p in parts))

    @classmethod
    def zero(cls, dim: int) -> "VectorField":
        from .ast import Const

        return cls(dim, tuple(Const(0.0) for _ in range(dim)))

    def evaluate(self, point: Sequence[float]) -> np.ndarray:
        return np.array([evaluate(c, point) for c in self.components], dtype=float)

    def simplified(self) -> "VectorField":
        return VectorField(self.dim, tuple(simplify(c) for c in self.components))

    def is_zero(self) -> bool:
        from .ast import Const

        return all(isinstance(c, Const) and c.value == 0.0 for c in self.components)

    def describe(self) -> str:
        return ", ".join(to_text(c) for c in self.components)


@dataclass(frozen=True, slots=True)
class CoefficientSet:
    """Drift and diffusion columns of an SDE in dimension ``d`` with ``m`` noises."""

    d: int
    m: int
    drift: VectorField
    diffusion: tuple[VectorField, ...]

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError(f"need at least one diffusion column, got m={self.m}")
        if self.drift.dim != self.d:
            raise ConfigError("drift dimension does not match d")
        if len(self.diffusion) != self.m:
            raise ConfigError(
                f"expected {self.m} diffusion columns, got {len(self.diffusion)}"
            )
        for j, col in enumerate(self.diffusion, start=1):
            if col.dim != self.d:
                raise ConfigError(f"diffusion column {j} dimension does not match d")

    @classmethod
    def from_text(cls, d: int, m: int, drift: str, sigma_columns: Sequence[str]) -> "CoefficientSet":
        cols = tuple(VectorField.from_text(s, d) for s in sigma_columns)
        return cls(d, m, VectorField.from_text(drift, d), cols)

    def sigma_at(self, point: Sequence[float]) -> np.ndarray:
        """Diffusion matrix (d, m) at a point."""
        return np.column_stack([col.evaluate(point) for col in self.diffusion])


def jacobian(field: VectorField) -> tuple[tuple[Expression, ...], ...]:
    """Jacobian matrix of expressions; row j, column i holds d(field_j)/d(x_i).

    With this orientation ``jacobian(u) @ v`` is the directional derivative of
    ``u`` along ``v``, so the bracket [v, u] = Ju*v - Jv*u reads off directly.
    """
    return tuple(
        tuple(simplify(differentiate(comp, i)) for i in range(1, field.dim + 1))
        for comp in field.components
    )


# ---------------------------------------------------------------------------
# Vectorised compilation helpers.  All return callables that accept X with
# shape (..., d) and return float64 arrays with the documented trailing shape.


def compile_expression_stack(
    exprs: Sequence[Expression], shape: tuple[int, ...]
) -> Callable[[np.ndarray], np.ndarray]:
    """Compile a flat list of expressions into one (..., *shape) evaluator."""
    fns = [compile_expression(e) for e in exprs]

    def evaluator(X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        cols = [fn(X) for fn in fns]
        out = np.stack(cols, axis=-1)
        return out.reshape(X.shape[:-1] + shape)

    return evaluator


@lru_cache(maxsize=512)
def compile_field(field: VectorField) -> Callable[[np.ndarray], np.ndarray]:
    """X (..., d) -> field values (..., d)."""
    return compile_expression_stack(field.components, (field.dim,))


@lru_cache(maxsize=512)
def compile_jacobian(field: VectorField) -> Callable[[np.ndarray], np.ndarray]:
    """X (..., d) -> Jacobian values (..., d, d), row j col i = d f_j / d x_i."""
    rows = jacobian(field)
    flat = [entry for row in rows for entry in row]
    return compile_expression_stack(flat, (field.dim, field.dim))


@lru_cache(maxsize=256)
def compile_diffusion(coeffs: CoefficientSet) -> Callable[[np.ndarray], np.ndarray]:
    """X (..., d) -> diffusion matrix (..., d, m)."""
    exprs = []
    for i in range(coeffs.d):
        for col in coeffs.diffusion:
            exprs.append(col.components[i])
    return compile_expression_stack(exprs, (coeffs.d, coeffs.m))


@lru_cache(maxsize=256)
def compile_diffusion_jacobians(coeffs: CoefficientSet) -> Callable[[np.ndarray], np.ndarray]:
    """X (..., d) -> stacked diffusion-column Jacobians (..., m, d, d)."""
    exprs = []
    for col in coeffs.diffusion:
        for row in jacobian(col):
            exprs.extend(row)
    return compile_expression_stack(exprs, (coeffs.m, coeffs.d, coeffs.d))
