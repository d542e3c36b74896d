"""Iterated Stratonovich integrals and truncated flow-expansion remainders.

The midpoint (trapezoidal-in-integrand) rule discretises every Stratonovich
integral: integral of f against dW adds (f_k + f_{k+1})/2 * dW_k per step,
and integrals against the time direction (index 0) use the step itself as
the weight, i.e. the trapezoid rule.  Midpoint telescopes exactly for
integral of W dW, and nested integrals reuse the same grid: quadrature
error is absorbed into the convergence tests rather than substep
refinement.
"""
from __future__ import annotations

import numpy as np

from ..brackets import BracketTable, MultiIndex, enumerate_indices
from ..errors import ConfigError
from ..fieldlang import VectorField, compile_field
from .brownian import BrownianGrid
from .simulate import FlowTrajectory, Trajectory

__all__ = [
    "iterated_integral",
    "pullback_process",
    "bracket_pullback",
    "chaos_remainder_path",
    "chaos_remainder",
    "chaos_remainder_ensemble",
    "expansion_coefficients",
]


def _cumulative_midpoint(values: np.ndarray, weights: np.ndarray, axis: int) -> np.ndarray:
    """out[j] = sum_{k<j} (f_k + f_{k+1})/2 * w_k along ``axis``."""
    n1 = values.shape[axis]
    head = [slice(None)] * values.ndim
    tail = [slice(None)] * values.ndim
    head[axis] = slice(0, n1 - 1)
    tail[axis] = slice(1, n1)
    avg = 0.5 * (values[tuple(head)] + values[tuple(tail)])
    w = weights
    while w.ndim < avg.ndim:
        w = w[..., None]
    out = np.zeros_like(values)
    out[tuple(tail)] = np.cumsum(avg * w, axis=axis)
    return out


def _direction_weights(increments: np.ndarray, h: float, direction: int, m: int) -> np.ndarray:
    """Step weights for one noise direction; 0 is the time direction."""
    if direction == 0:
        shape = increments.shape[:-1]
        return np.full(shape, h)
    if not 1 <= direction <= m:
        raise ConfigError(f"direction {direction} outside 0..{m}")
    return increments[..., direction - 1]


def iterated_integral(
    alpha: MultiIndex, grid: BrownianGrid, z: np.ndarray | None = None
) -> np.ndarray:
    """Path of the iterated Stratonovich integral of ``z`` along ``alpha``.

    ``z`` is a process on the grid of shape (n+1,) or (n+1, d); ``None``
    means the unit process, recovering the plain iterated integrals.  The
    entries of ``alpha`` are consumed left to right, the last one being the
    outermost integrator.
    """
    alpha.validate_directions(grid.m)
    n = grid.n_steps
    if z is None:
        f = np.ones(n + 1)
    else:
        f = np.asarray(z, dtype=float)
        if f.shape[0] != n + 1:
            raise ConfigError(f"process has {f.shape[0]} samples, grid wants {n + 1}")
    for direction in alpha.entries:
        w = _direction_weights(grid.increments, grid.h, direction, grid.m)
        f = _cumulative_midpoint(f, w, axis=0)
    return f


def pullback_process(
    target: VectorField, flow: FlowTrajectory, trajectory: Trajectory
) -> np.ndarray:
    """Path of K(t) target(X(t)), the field pulled back through the flow."""
    vals = compile_field(target)(trajectory.states)
    return np.einsum("tij,tj->ti", flow.inverses, vals)


def bracket_pullback(
    alpha: MultiIndex,
    target: VectorField,
    flow: FlowTrajectory,
    trajectory: Trajectory,
    table: BracketTable,
) -> np.ndarray:
    """Pullback path of the iterated bracket of ``target`` along ``alpha``."""
    return pullback_process(table.bracket(target, alpha), flow, trajectory)


def expansion_coefficients(
    L: int, target: VectorField, table: BracketTable, x0: np.ndarray
) -> list[tuple[MultiIndex, np.ndarray]]:
    """Frozen bracket values T_alpha(target)(x0) for all weights <= L - 1."""
    if L < 1:
        raise ConfigError("L must be >= 1")
    x0 = np.asarray(x0, dtype=float)
    return [
        (alpha, table.bracket(target, alpha).evaluate(x0))
        for alpha in enumerate_indices(L - 1, table.m)
    ]


def chaos_remainder_path(
    L: int,
    target: VectorField,
    flow: FlowTrajectory,
    trajectory: Trajectory,
    table: BracketTable,
    grid: BrownianGrid,
) -> np.ndarray:
    """Pullback of ``target`` minus its truncated expansion, on the whole grid.

    The truncation keeps the frozen bracket values at x0 times the iterated
    integrals of every multi-index with weight <= L - 1.
    """
    pullback = pullback_process(target, flow, trajectory)
    truncation = np.zeros_like(pullback)
    for alpha, coeff in expansion_coefficients(L, target, table, trajectory.states[0]):
        if not np.any(coeff):
            continue
        path = iterated_integral(alpha, grid)
        truncation += path[:, None] * coeff[None, :]
    return pullback - truncation


def chaos_remainder(
    L: int,
    target: VectorField,
    t_index: int,
    flow: FlowTrajectory,
    trajectory: Trajectory,
    table: BracketTable,
    grid: BrownianGrid,
) -> np.ndarray:
    """Remainder vector at one grid index."""
    path = chaos_remainder_path(L, target, flow, trajectory, table, grid)
    if not 0 <= t_index <= trajectory.n_steps:
        raise ConfigError("t_index out of range")
    return path[t_index]


def chaos_remainder_ensemble(
    L: int,
    target: VectorField,
    table: BracketTable,
    h: float,
    states: np.ndarray,
    inverses: np.ndarray,
    increments: np.ndarray,
) -> np.ndarray:
    """Remainder paths for a whole ensemble, shape (paths, n+1, d).

    ``states`` is (paths, n+1, d), ``inverses`` (paths, n+1, d, d), and
    ``increments`` (paths, n, m) as stored by the ensemble engine.
    """
    m = table.m
    vals = compile_field(target)(states)
    pullback = np.einsum("btij,btj->bti", inverses, vals)
    truncation = np.zeros_like(pullback)
    x0 = states[0, 0]
    for alpha, coeff in expansion_coefficients(L, target, table, x0):
        if not np.any(coeff):
            continue
        f = np.ones(states.shape[:2])
        for direction in alpha.entries:
            w = _direction_weights(increments, h, direction, m)
            f = _cumulative_midpoint(f, w, axis=1)
        truncation += f[:, :, None] * coeff[None, None, :]
    return pullback - truncation
