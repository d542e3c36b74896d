"""Lie-bracket hierarchy, multi-index bookkeeping, and spanning diagnostics.

Builds the Stratonovich-corrected drift, iterated brackets of the coefficient
fields indexed by multi-indices over noise directions {0..m} (0 is the time
direction, whose entries count double in the weight), the Gram matrix of all
brackets up to a weight cap, and grid reports on where those brackets span
the state space.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm as _normal
from scipy.stats import qmc

from .errors import (
    BracketSizeError,
    ConfigError,
    EigenSolverError,
    EvaluationError,
    InternalInvariantError,
)
from .fieldlang import (
    CoefficientSet,
    Expression,
    VectorField,
    compile_expression_stack,
    differentiate,
    jacobian,
    node_count,
    simplify,
)
from .fieldlang.ast import Binary, Const

__all__ = [
    "MultiIndex",
    "EMPTY_INDEX",
    "enumerate_indices",
    "stratonovich_drift",
    "lie_bracket",
    "BracketTable",
    "gram_matrix",
    "spanning_value",
    "GridSpec",
    "HormanderReport",
    "check_hormander",
    "ball_sample",
    "local_field_bound",
    "coefficient_local_bound",
    "bracket_local_bound",
    "expansion_local_bound",
]

# PSD slack for Gram matrices assembled from outer products; anything below
# this is an internal error, anything in [tol, 0) is rounding and clamps to 0.
_PSD_TOL = -1e-10

_UH_CAVEAT = (
    "empirical surrogate over a finite point set; the infimum over the whole "
    "space cannot be established by sampling"
)


@dataclass(frozen=True, slots=True)
class MultiIndex:
    """Tuple over noise directions {0..m}; the empty tuple is allowed.

    The weight counts time entries (zeros) twice: weight = length + #zeros,
    so length <= weight <= 2*length always holds.
    """

    entries: tuple[int, ...] = ()

    def __post_init__(self):
        for e in self.entries:
            if e < 0:
                raise ConfigError(f"multi-index entries must be >= 0, got {e}")

    @property
    def length(self) -> int:
        return len(self.entries)

    @property
    def weight(self) -> int:
        return len(self.entries) + sum(1 for e in self.entries if e == 0)

    @property
    def is_empty(self) -> bool:
        return not self.entries

    @property
    def last(self) -> int:
        if not self.entries:
            raise ConfigError("the empty multi-index has no last entry")
        return self.entries[-1]

    @property
    def prefix(self) -> "MultiIndex":
        if not self.entries:
            raise ConfigError("the empty multi-index has no prefix")
        return MultiIndex(self.entries[:-1])

    def validate_directions(self, m: int) -> None:
        for e in self.entries:
            if e > m:
                raise ConfigError(f"direction {e} exceeds noise count m={m}")

    def __repr__(self) -> str:
        return f"MultiIndex{self.entries!r}"


EMPTY_INDEX = MultiIndex(())


def enumerate_indices(max_weight: int, m: int) -> list[MultiIndex]:
    """All multi-indices with weight <= max_weight, sorted by (length, lex).

    Includes the empty index.  Since every entry contributes at least one to
    the weight, lengths above max_weight cannot occur.
    """
    if max_weight < 0:
        raise ConfigError("max_weight must be >= 0")
    if m < 1:
        raise ConfigError("m must be >= 1")
    out = [EMPTY_INDEX]
    for length in range(1, max_weight + 1):
        for entries in itertools.product(range(m + 1), repeat=length):
            mi = MultiIndex(entries)
            if mi.weight <= max_weight:
                out.append(mi)
    return out


def lie_bracket(v: VectorField, u: VectorField) -> VectorField:
    """Commutator field [v, u] = (Jacobian of u) v - (Jacobian of v) u."""
    if v.dim != u.dim:
        raise ConfigError("bracket of fields with different dimensions")
    ju = jacobian(u)
    jv = jacobian(v)
    comps = []
    for j in range(v.dim):
        term: Expression = Const(0.0)
        for i in range(v.dim):
            term = Binary("add", term, Binary("mul", ju[j][i], v.components[i]))
            term = Binary("sub", term, Binary("mul", jv[j][i], u.components[i]))
        comps.append(simplify(term))
    return VectorField(v.dim, tuple(comps))


def stratonovich_drift(coeffs: CoefficientSet) -> VectorField:
    """Drift of the Stratonovich form: b - (1/2) sum_i (Jacobian sigma^i) sigma^i."""
    d = coeffs.d
    comps = []
    for c in range(d):
        term: Expression = coeffs.drift.components[c]
        for col in coeffs.diffusion:
            for j in range(d):
                correction = Binary(
                    "mul",
                    Binary("mul", Const(0.5), col.components[j]),
                    simplify(differentiate(col.components[c], j + 1)),
                )
                term = Binary("sub", term, correction)
        comps.append(simplify(term))
    return VectorField(d, tuple(comps))


class BracketTable:
    """Memoised iterated brackets over a coefficient set.

    ``direction(0)`` is the Stratonovich drift, ``direction(j)`` for j >= 1
    the j-th diffusion column.  ``bracket(base, alpha)`` returns the iterated
    bracket of ``base`` along ``alpha``: the empty index maps to ``base``
    itself and appending a direction j wraps the previous field in
    [direction(j), . ].  Every bracket is simplified on construction and the
    AST size is capped (bracket expressions can grow combinatorially).

    Construction and population are single-writer; once built, lookups and
    evaluations are read-only and safe to share across threads.
    """

    def __init__(self, coeffs: CoefficientSet, max_nodes: int = 100_000):
        self.coeffs = coeffs
        self.max_nodes = max_nodes
        self.drift_direction = stratonovich_drift(coeffs)
        self._cache: dict[tuple[VectorField, MultiIndex], VectorField] = {}
        self._max_weight_seen = 0

    @property
    def d(self) -> int:
        return self.coeffs.d

    @property
    def m(self) -> int:
        return self.coeffs.m

    @property
    def max_weight_covered(self) -> int:
        return self._max_weight_seen

    def direction(self, j: int) -> VectorField:
        if j == 0:
            return self.drift_direction
        if 1 <= j <= self.m:
            return self.coeffs.diffusion[j - 1]
        raise ConfigError(f"direction {j} exceeds noise count m={self.m}")

    def bracket(self, base: VectorField, alpha: MultiIndex) -> VectorField:
        """Iterated bracket of ``base`` along ``alpha`` (memoised)."""
        alpha.validate_directions(self.m)
        key = (base, alpha)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        if alpha.is_empty:
            result = base
        else:
            inner = self.bracket(base, alpha.prefix)
            result = lie_bracket(self.direction(alpha.last), inner)
            size = sum(node_count(c) for c in result.components)
            if size > self.max_nodes:
                raise BracketSizeError(
                    f"bracket along {alpha.entries} grew to {size} AST nodes "
                    f"(cap {self.max_nodes}); raise max_nodes or lower the weight"
                )
        self._cache[key] = result
        self._max_weight_seen = max(self._max_weight_seen, alpha.weight)
        return result

    def diffusion_bracket(self, k: int, alpha: MultiIndex) -> VectorField:
        """Iterated bracket of the k-th diffusion column, k in 1..m."""
        if not 1 <= k <= self.m:
            raise ConfigError(f"diffusion column index {k} out of range 1..{self.m}")
        return self.bracket(self.coeffs.diffusion[k - 1], alpha)


def gram_matrix(x: Sequence[float], L: int, table: BracketTable) -> np.ndarray:
    """Sum of outer products w w^T over all diffusion brackets of weight < L.

    w ranges over the iterated brackets of each diffusion column along every
    multi-index with weight <= L-1, evaluated at x.  The quadratic form
    eta^T M eta is exactly the spanning form of the bracket family at x.
    """
    if L < 1:
        raise ConfigError("L must be >= 1")
    x = np.asarray(x, dtype=float)
    M = np.zeros((table.d, table.d))
    for k in range(1, table.m + 1):
        for alpha in enumerate_indices(L - 1, table.m):
            w = table.diffusion_bracket(k, alpha).evaluate(x)
            M += np.outer(w, w)
    return M


def _min_eigenvalue(M: np.ndarray) -> float:
    try:
        eigs = np.linalg.eigvalsh(M)
    except np.linalg.LinAlgError as exc:
        raise EigenSolverError(f"symmetric eigensolver failed: {exc}") from exc
    return float(eigs[0])


def spanning_value(x: Sequence[float], L: int, table: BracketTable) -> float:
    """Capped smallest eigenvalue of the bracket Gram matrix, in [0, 1].

    Computed exactly as an eigenvalue problem (the infimum of the quadratic
    form over unit directions equals the smallest eigenvalue).  A smallest
    eigenvalue below the PSD slack indicates a broken construction and
    raises; small negative rounding clamps to zero.
    """
    lam = _min_eigenvalue(gram_matrix(x, L, table))
    if lam < _PSD_TOL:
        raise InternalInvariantError(
            f"bracket Gram matrix has eigenvalue {lam} below PSD tolerance"
        )
    return min(max(lam, 0.0), 1.0)


@dataclass(frozen=True, slots=True)
class GridSpec:
    """Axis-aligned product grid used as a sampler spec for spanning checks."""

    lows: tuple[float, ...]
    highs: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.lows) == len(self.highs) == len(self.counts)):
            raise ConfigError("grid lows/highs/counts must share a length")
        for lo, hi, n in zip(self.lows, self.highs, self.counts):
            if n < 1:
                raise ConfigError("grid counts must be >= 1")
            if hi < lo:
                raise ConfigError("grid high below low")

    @property
    def dim(self) -> int:
        return len(self.lows)

    def axes(self) -> list[np.ndarray]:
        return [
            np.linspace(lo, hi, n) if n > 1 else np.array([(lo + hi) / 2.0])
            for lo, hi, n in zip(self.lows, self.highs, self.counts)
        ]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.column_stack([m.reshape(-1) for m in mesh])


@dataclass(slots=True)
class HormanderReport:
    """Per-point spanning values and the empirical uniform-spanning summary.

    ``in_span_set`` marks points whose capped smallest eigenvalue exceeds a
    small tolerance.  ``inf_value`` over the finite sample is only a
    surrogate for the uniform constant; ``caveat`` says so explicitly.
    """

    L: int
    points: np.ndarray
    values: np.ndarray
    in_span_set: np.ndarray
    gram: np.ndarray
    membership_tol: float
    caveat: str = field(default=_UH_CAVEAT)

    @property
    def inf_value(self) -> float:
        return float(self.values.min())

    @property
    def empirical_uniform(self) -> bool:
        return bool(self.in_span_set.all())

    @property
    def level_candidate(self) -> int | None:
        return self.L if self.empirical_uniform else None

    def to_json_dict(self) -> dict:
        records = [
            {
                "x": [float(v) for v in pt],
                "L": self.L,
                "V_L": float(val),
                "in_U_L": bool(member),
            }
            for pt, val, member in zip(self.points, self.values, self.in_span_set)
        ]
        return {
            "points": records,
            "summary": {
                "inf_V_L": self.inf_value,
                "L0_candidate": self.level_candidate,
                "empirical_UH": self.empirical_uniform,
                "C_L0_estimate": self.inf_value,
                "caveat": self.caveat,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


def check_hormander(
    points: Iterable[Sequence[float]] | GridSpec,
    L: int,
    table: BracketTable,
    membership_tol: float = 1e-12,
) -> HormanderReport:
    """Evaluate the spanning value at every point and summarise the sample."""
    pts = points.points() if isinstance(points, GridSpec) else np.atleast_2d(
        np.asarray(list(points), dtype=float)
    )
    if pts.size == 0:
        raise ConfigError("empty point set for spanning check")
    if pts.shape[1] != table.d:
        raise ConfigError(f"points have dimension {pts.shape[1]}, expected {table.d}")
    values = np.empty(len(pts))
    grams = np.empty((len(pts), table.d, table.d))
    for i, x in enumerate(pts):
        grams[i] = gram_matrix(x, L, table)
        lam = _min_eigenvalue(grams[i])
        if lam < _PSD_TOL:
            raise InternalInvariantError(
                f"bracket Gram matrix at {x} has eigenvalue {lam} below PSD tolerance"
            )
        values[i] = min(max(lam, 0.0), 1.0)
    members = values > membership_tol
    return HormanderReport(L, pts, values, members, grams, membership_tol)


# ---------------------------------------------------------------------------
# Local sup-norm bounds over the closed ball B(x, radius), approximated on a
# low-discrepancy sample.  The sample for a given (dim, count) is a prefix of
# one fixed Sobol sequence, so enlarging the sample can only increase the
# reported bound; the centre and the axis-aligned boundary points are always
# included so interval suprema in low dimension are hit exactly.


def ball_sample(center: Sequence[float], radius: float, n: int) -> np.ndarray:
    center = np.asarray(center, dtype=float)
    d = center.size
    sampler = qmc.Sobol(d + 1, scramble=False)
    u = sampler.random(max(n, 1))
    u = np.clip(u, 2.0**-20, 1.0 - 2.0**-20)
    dirs = _normal.ppf(u[:, :d])
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    # the midpoint of the cube maps to the zero vector; give it a fixed axis
    degenerate = norms[:, 0] == 0.0
    dirs[degenerate, 0] = 1.0
    norms[degenerate, 0] = 1.0
    dirs = dirs / norms
    radii = radius * u[:, d:] ** (1.0 / d)
    pts = center + dirs * radii
    fixed = [center]
    for axis in range(d):
        offset = np.zeros(d)
        offset[axis] = radius
        fixed.append(center + offset)
        fixed.append(center - offset)
    return np.vstack([np.asarray(fixed), pts])


def _derivative_stack(fld: VectorField, order: int) -> list[list[Expression]]:
    """Expression groups for |f|, Jacobian, and second derivatives up to order."""
    groups = [list(fld.components)]
    if order >= 1:
        jac = jacobian(fld)
        groups.append([e for row in jac for e in row])
        if order >= 2:
            second = []
            for row in jac:
                for entry in row:
                    for i in range(1, fld.dim + 1):
                        second.append(simplify(differentiate(entry, i)))
            groups.append(second)
    return groups


def local_field_bound(
    fields: Sequence[VectorField],
    x: Sequence[float],
    radius: float = 1.0,
    order: int = 0,
    n_ball: int = 512,
) -> tuple[float, int]:
    """Max over the ball sample of the Euclidean/Frobenius norms of each field
    and its derivative tensors up to ``order`` (0, 1, or 2).

    Returns (bound, number of sample points).  Monotone non-decreasing in
    ``n_ball``.  Non-finite field values inside the ball raise.
    """
    if order not in (0, 1, 2):
        raise ConfigError("derivative order must be 0, 1, or 2")
    pts = ball_sample(x, radius, n_ball)
    best = 0.0
    for fld in fields:
        for group in _derivative_stack(fld, order):
            fn = compile_expression_stack(tuple(group), (len(group),))
            vals = fn(pts)
            if not np.isfinite(vals).all():
                raise _ball_error(fld, x, radius)
            norms = np.sqrt(np.sum(vals * vals, axis=-1))
            best = max(best, float(norms.max()))
    return best, len(pts)


def _ball_error(fld: VectorField, x, radius) -> EvaluationError:
    return EvaluationError(
        f"field '{fld.describe()}' is non-finite inside the ball of radius "
        f"{radius} around {np.asarray(x).tolist()}"
    )


def coefficient_local_bound(
    coeffs: CoefficientSet, x: Sequence[float], radius: float = 1.0, n_ball: int = 512
) -> float:
    """sup over B(x, radius) of max(Frobenius norm of sigma, |b|).

    This is the zeroth-order variant used by the density-envelope validity
    region.
    """
    pts = ball_sample(x, radius, n_ball)
    drift_exprs = tuple(coeffs.drift.components)
    bfn = compile_expression_stack(drift_exprs, (coeffs.d,))
    bvals = bfn(pts)
    sig_exprs = tuple(
        col.components[i] for i in range(coeffs.d) for col in coeffs.diffusion
    )
    sfn = compile_expression_stack(sig_exprs, (coeffs.d * coeffs.m,))
    svals = sfn(pts)
    if not (np.isfinite(bvals).all() and np.isfinite(svals).all()):
        raise _ball_error(coeffs.drift, x, radius)
    bnorm = np.sqrt(np.sum(bvals * bvals, axis=-1))
    snorm = np.sqrt(np.sum(svals * svals, axis=-1))
    return float(np.maximum(bnorm, snorm).max())


def bracket_local_bound(
    table: BracketTable,
    x: Sequence[float],
    L: int,
    radius: float = 1.0,
    n_ball: int = 512,
    max_len: int | None = None,
) -> float:
    """Second-order sup-norm bound over all diffusion brackets of length <= L+1.

    Variant feeding the eigenvalue-tail envelope fits.  The cap is on bracket
    length (not weight); pass ``max_len`` to override L+1.
    """
    cap = (L + 1) if max_len is None else max_len
    fields = []
    for k in range(1, table.m + 1):
        for alpha in _indices_by_length(cap, table.m):
            fields.append(table.diffusion_bracket(k, alpha))
    bound, _ = local_field_bound(fields, x, radius=radius, order=2, n_ball=n_ball)
    return bound


def expansion_local_bound(
    table: BracketTable,
    target: VectorField,
    x: Sequence[float],
    L: int,
    radius: float = 1.0,
    n_ball: int = 512,
) -> float:
    """max of second-order norms of all directions and zeroth-order norms of
    the iterated brackets of ``target`` up to length L+1.

    Variant feeding remainder-tail envelope fits.
    """
    directions = [table.direction(j) for j in range(table.m + 1)]
    dir_bound, _ = local_field_bound(directions, x, radius=radius, order=2, n_ball=n_ball)
    targets = [table.bracket(target, alpha) for alpha in _indices_by_length(L + 1, table.m)]
    tgt_bound, _ = local_field_bound(targets, x, radius=radius, order=0, n_ball=n_ball)
    return max(dir_bound, tgt_bound)


def _indices_by_length(max_len: int, m: int) -> list[MultiIndex]:
    out = [EMPTY_INDEX]
    for length in range(1, max_len + 1):
        out.extend(
            MultiIndex(entries) for entries in itertools.product(range(m + 1), repeat=length)
        )
    return out
