"""Schemes for the state, the first-variation flow, and its inverse.

The state X follows the Ito SDE dX = b(X) dt + sigma(X) dW.  Along a frozen
state path, the first-variation flow J and its inverse K satisfy linear
matrix SDEs:

    J_{k+1} = J_k + h grad_b(X_k) J_k + sum_i grad_sigma_i(X_k) J_k dW^i_k
    K_{k+1} = K_k - h K_k [grad_b(X_k) - sum_i grad_sigma_i(X_k)^2]
                  - sum_i K_k grad_sigma_i(X_k) dW^i_k

The matrix-squared correction in K is the unique reading under which the
Ito product rule gives d(KJ) = 0, and the K J = I identity is enforced as a
test surface rather than a runtime assertion.

State schemes: ``tamed-euler`` divides the drift increment by 1 + h|b| so
superlinear monotone drifts cannot blow the explicit step up;
``split-step-backward-euler`` solves z = X_k + h b(z) by damped Newton and
then applies the noise at z; plain ``euler`` is kept for comparison runs
only.  Non-finite updates freeze the path at its last finite state and are
counted, never silently dropped, so scheme blow-up is observable data.

Ensembles assign one Philox stream per path keyed by (seed, stream_id) and
aggregate per-path records in ascending stream order, making every output
bit independent of block sizes, worker counts, and scheduling.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..errors import ConfigError, InternalInvariantError, SimulationDiverged
from ..fieldlang import (
    CoefficientSet,
    compile_diffusion,
    compile_diffusion_jacobians,
    compile_field,
    compile_jacobian,
)
from .brownian import BrownianGrid, stream_increments

__all__ = [
    "SCHEMES",
    "SimConfig",
    "Trajectory",
    "FlowTrajectory",
    "MalliavinPair",
    "RecordSpec",
    "EnsembleResult",
    "simulate_x",
    "simulate_flow",
    "run_ensemble",
    "malliavin_derivative",
    "malliavin_matrices",
    "malliavin_checkpoint_ensemble",
    "nearest_index",
]

SCHEMES = ("tamed-euler", "split-step-backward-euler", "euler")

_NEWTON_TOL = 1e-12
_NEWTON_MAX_ITER = 50

# Matrices assembled from outer products may pick up this much asymmetric
# rounding relative to their trace before we call it an internal error.
_PSD_TRACE_TOL = 1e-9


@dataclass(frozen=True, slots=True)
class SimConfig:
    """Grid, scheme, and stream parameters shared by one simulation run."""

    horizon: float
    n_steps: int
    x0: tuple[float, ...]
    scheme: str = "tamed-euler"
    seed: int = 0
    monotone_bound: float | None = None

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        n = self.n_steps
        if n < 1 or (n & (n - 1)) != 0:
            raise ConfigError(f"n_steps must be a positive power of two, got {n}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if not self.x0:
            raise ConfigError("x0 must have at least one component")
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        for v in self.x0:
            if not math.isfinite(v):
                raise ConfigError("x0 must be finite")
        if (
            self.scheme == "split-step-backward-euler"
            and self.monotone_bound is not None
            and self.h * self.monotone_bound >= 1.0
        ):
            raise ConfigError(
                f"h * L = {self.h * self.monotone_bound:.3g} >= 1: the implicit "
                "step is not guaranteed a unique root; reduce h"
            )

    @property
    def h(self) -> float:
        return self.horizon / self.n_steps

    @property
    def d(self) -> int:
        return len(self.x0)

    @property
    def comparison_only(self) -> bool:
        """Plain Euler is shipped for blow-up comparisons, not production runs."""
        return self.scheme == "euler"

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.h


def nearest_index(config: SimConfig, t: float) -> int:
    """Grid index closest to time t, clipped to [0, n_steps]."""
    idx = int(round(t / config.h))
    return min(max(idx, 0), config.n_steps)


@dataclass(slots=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_steps + 1, d)

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def dim(self) -> int:
        return self.states.shape[1]


@dataclass(slots=True)
class FlowTrajectory:
    times: np.ndarray
    jacobians: np.ndarray  # (n_steps + 1, d, d)
    inverses: np.ndarray  # (n_steps + 1, d, d)

    def identity_defect(self) -> np.ndarray:
        """Frobenius norm of K_k J_k - I along the path."""
        d = self.jacobians.shape[-1]
        prod = np.einsum("tij,tjk->tik", self.inverses, self.jacobians)
        return np.linalg.norm(prod - np.eye(d), axis=(1, 2))


@dataclass(slots=True)
class MalliavinPair:
    """Covariance matrices C(t) and Q(t) = J C J^T for one path."""

    t: float
    c_matrix: np.ndarray
    q_matrix: np.ndarray
    quadrature: str = "left-endpoint"

    def validate(self) -> None:
        for name, mat in (("C", self.c_matrix), ("Q", self.q_matrix)):
            if not np.allclose(mat, mat.T, atol=1e-12, rtol=0.0):
                raise InternalInvariantError(f"{name} matrix is not symmetric")
            lam = np.linalg.eigvalsh(mat)[0]
            if lam < -_PSD_TRACE_TOL * max(1.0, abs(np.trace(mat))):
                raise InternalInvariantError(
                    f"{name} matrix has eigenvalue {lam} below the PSD tolerance"
                )


@dataclass(frozen=True, slots=True)
class RecordSpec:
    """What the ensemble engine stores beyond terminal states."""

    flows: bool = True
    store_states: bool = False
    store_jacobians: bool = False
    store_inverses: bool = False
    store_increments: bool = False
    c_checkpoints: tuple[int, ...] = ()
    track_sup: bool = False
    track_flow_identity: bool = False

    @property
    def needs_flows(self) -> bool:
        return (
            self.flows
            or bool(self.c_checkpoints)
            or self.store_jacobians
            or self.store_inverses
            or self.track_flow_identity
        )


@dataclass(slots=True)
class EnsembleResult:
    """Per-path records assembled in ascending stream order."""

    config: SimConfig
    stream_ids: np.ndarray
    final_states: np.ndarray
    diverged_step: np.ndarray  # -1 where the path stayed finite
    final_jacobians: np.ndarray | None = None
    final_inverses: np.ndarray | None = None
    sup_abs: np.ndarray | None = None
    flow_identity_sup: np.ndarray | None = None
    c_at: dict[int, np.ndarray] = field(default_factory=dict)
    j_at: dict[int, np.ndarray] = field(default_factory=dict)
    states: np.ndarray | None = None
    jacobians: np.ndarray | None = None
    inverses: np.ndarray | None = None
    increments: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return len(self.stream_ids)

    @property
    def alive(self) -> np.ndarray:
        return self.diverged_step < 0

    @property
    def diverged_count(self) -> int:
        return int((~self.alive).sum())

    @property
    def divergence_fraction(self) -> float:
        return self.diverged_count / self.n_paths


def _compiled_bundle(coeffs: CoefficientSet, needs_flows: bool):
    cb = compile_field(coeffs.drift)
    csig = compile_diffusion(coeffs)
    if needs_flows or True:
        # drift jacobian is also needed by the implicit scheme's Newton solve
        cgb = compile_jacobian(coeffs.drift)
    cgs = compile_diffusion_jacobians(coeffs) if needs_flows else None
    return cb, csig, cgb, cgs


def _flow_step(j, k_inv, gb, gs, dwk, h):
    """One Euler step of the J and K matrix SDEs (batched)."""
    jn = (
        j
        + h * np.einsum("bij,bjk->bik", gb, j)
        + np.einsum("bmij,bjk,bm->bik", gs, j, dwk)
    )
    corr = np.einsum("bmij,bmjk->bik", gs, gs)
    kn = (
        k_inv
        - h * np.einsum("bij,bjk->bik", k_inv, gb - corr)
        - np.einsum("bij,bmjk,bm->bik", k_inv, gs, dwk)
    )
    return jn, kn


def _implicit_state(cb, cgb, x, h):
    """Solve z = x + h b(z) by damped Newton with step halving.

    Vectorised over rows; every row's iteration depends only on its own
    values.  Returns (z, converged mask).
    """
    B, d = x.shape
    eye = np.eye(d)
    z = x.copy()

    def residual(candidate):
        return candidate - x - h * cb(candidate)

    fz = residual(z)
    fnorm = np.linalg.norm(fz, axis=1)
    scale = 1.0 + np.linalg.norm(z, axis=1)
    converged = fnorm <= _NEWTON_TOL * scale
    failed = ~np.isfinite(fnorm)
    for _ in range(_NEWTON_MAX_ITER):
        active = ~(converged | failed)
        if not active.any():
            break
        gb = cgb(z)
        A = eye - h * gb
        try:
            delta = np.linalg.solve(A, -fz[..., None])[..., 0]
        except np.linalg.LinAlgError:
            failed |= active
            break
        lam = np.ones(B)
        improved = np.zeros(B, dtype=bool)
        trial_z = z.copy()
        trial_f = fz.copy()
        trial_norm = fnorm.copy()
        for _ in range(20):
            pending = active & ~improved
            if not pending.any():
                break
            cand = z + lam[:, None] * delta
            fcand = residual(cand)
            cnorm = np.linalg.norm(fcand, axis=1)
            accept = pending & np.isfinite(cnorm) & (cnorm <= (1.0 - 1e-4 * lam) * fnorm)
            trial_z = np.where(accept[:, None], cand, trial_z)
            trial_f = np.where(accept[:, None], fcand, trial_f)
            trial_norm = np.where(accept, cnorm, trial_norm)
            improved |= accept
            lam = np.where(improved, lam, lam * 0.5)
        failed |= active & ~improved
        z, fz, fnorm = trial_z, trial_f, trial_norm
        scale = 1.0 + np.linalg.norm(z, axis=1)
        converged |= (~failed) & (fnorm <= _NEWTON_TOL * scale)
    return z, converged & ~failed


def _simulate_block(
    coeffs: CoefficientSet, config: SimConfig, dw: np.ndarray, record: RecordSpec
) -> dict:
    d, m = coeffs.d, coeffs.m
    n, h = config.n_steps, config.h
    B = dw.shape[0]
    if dw.shape != (B, n, m):
        raise InternalInvariantError(f"increment block has shape {dw.shape}")
    needs_flows = record.needs_flows
    cb, csig, cgb, cgs = _compiled_bundle(coeffs, needs_flows)
    tamed = config.scheme == "tamed-euler"
    implicit = config.scheme == "split-step-backward-euler"

    x = np.tile(np.asarray(config.x0), (B, 1))
    alive = np.ones(B, dtype=bool)
    diverged = np.full(B, -1, dtype=np.int64)
    eye = np.eye(d)
    j = k_inv = None
    if needs_flows:
        j = np.tile(eye, (B, 1, 1))
        k_inv = np.tile(eye, (B, 1, 1))
    cpset = set(record.c_checkpoints)
    accumulate_c = bool(cpset)
    c = np.zeros((B, d, d)) if accumulate_c else None
    c_snapshots: dict[int, np.ndarray] = {}
    j_snapshots: dict[int, np.ndarray] = {}
    sup_abs = np.linalg.norm(x, axis=1) if record.track_sup else None
    kj_sup = np.zeros(B) if record.track_flow_identity else None
    states = np.empty((B, n + 1, d)) if record.store_states else None
    jacobians = np.empty((B, n + 1, d, d)) if record.store_jacobians else None
    inverses = np.empty((B, n + 1, d, d)) if record.store_inverses else None

    def snapshot(idx):
        c_snapshots[idx] = c.copy()
        j_snapshots[idx] = j.copy()

    with np.errstate(all="ignore"):
        for k in range(n):
            if accumulate_c and k in cpset:
                snapshot(k)
            if states is not None:
                states[:, k] = x
            if jacobians is not None:
                jacobians[:, k] = j
            if inverses is not None:
                inverses[:, k] = k_inv

            dwk = dw[:, k, :]
            bx = cb(x)
            newton_ok = None
            if tamed:
                taming = 1.0 + h * np.linalg.norm(bx, axis=1, keepdims=True)
                drift_inc = (h * bx) / taming
                noise_point = x
            elif implicit:
                noise_point, newton_ok = _implicit_state(cb, cgb, x, h)
                drift_inc = noise_point - x
            else:
                drift_inc = h * bx
                noise_point = x
            sig_state = csig(noise_point)
            xn = x + drift_inc + np.einsum("bim,bm->bi", sig_state, dwk)
            ok = np.isfinite(xn).all(axis=1)
            if newton_ok is not None:
                ok &= newton_ok

            c_inc = jn = kn = None
            if needs_flows:
                gb = cgb(x)
                gs = cgs(x)
                if accumulate_c:
                    sig_left = sig_state if not implicit else csig(x)
                    ks = np.einsum("bij,bjm->bim", k_inv, sig_left)
                    c_inc = h * np.einsum("bim,bjm->bij", ks, ks)
                jn, kn = _flow_step(j, k_inv, gb, gs, dwk, h)
                ok &= np.isfinite(jn).all(axis=(1, 2))
                ok &= np.isfinite(kn).all(axis=(1, 2))

            newly_dead = alive & ~ok
            diverged[newly_dead] = k
            alive &= ok
            keep1 = alive[:, None]
            x = np.where(keep1, xn, x)
            if needs_flows:
                keep2 = alive[:, None, None]
                j = np.where(keep2, jn, j)
                k_inv = np.where(keep2, kn, k_inv)
                if accumulate_c:
                    c = np.where(keep2, c + c_inc, c)
            if sup_abs is not None:
                sup_abs = np.maximum(sup_abs, np.linalg.norm(x, axis=1))
            if kj_sup is not None:
                defect = np.einsum("bij,bjk->bik", k_inv, j) - eye
                val = np.linalg.norm(defect, axis=(1, 2))
                kj_sup = np.where(alive, np.maximum(kj_sup, val), kj_sup)

        if accumulate_c and n in cpset:
            snapshot(n)
        if states is not None:
            states[:, n] = x
        if jacobians is not None:
            jacobians[:, n] = j
        if inverses is not None:
            inverses[:, n] = k_inv

    return {
        "final_states": x,
        "diverged_step": diverged,
        "final_jacobians": j,
        "final_inverses": k_inv,
        "sup_abs": sup_abs,
        "flow_identity_sup": kj_sup,
        "c_at": c_snapshots,
        "j_at": j_snapshots,
        "states": states,
        "jacobians": jacobians,
        "inverses": inverses,
        "increments": dw if record.store_increments else None,
    }


def _block_increments(config: SimConfig, m: int, stream_ids: np.ndarray) -> np.ndarray:
    n = config.n_steps
    dw = np.empty((len(stream_ids), n, m))
    for i, sid in enumerate(stream_ids):
        dw[i] = stream_increments(config.seed, int(sid), n, m, config.h)
    return dw


def _default_block_size(config: SimConfig, coeffs: CoefficientSet, record: RecordSpec) -> int:
    n, d, m = config.n_steps, coeffs.d, coeffs.m
    per_path = n * m  # increments
    per_path += (n + 1) * d if record.store_states else 0
    per_path += 2 * (n + 1) * d * d if (record.store_jacobians or record.store_inverses) else 0
    per_path += n * m if record.store_increments else 0
    per_path = max(per_path, 1)
    budget = 64 * 1024 * 1024 // 8  # floats per block
    return max(32, min(budget // per_path, 16384))


def run_ensemble(
    coeffs: CoefficientSet,
    config: SimConfig,
    n_paths: int,
    record: RecordSpec = RecordSpec(),
    workers: int = 1,
    first_stream: int = 0,
    block_size: int | None = None,
) -> EnsembleResult:
    """Simulate ``n_paths`` independent streams and merge per-path records.

    Blocks are fixed-size slices of the stream range, so the per-path bits
    never depend on ``workers``; merging happens in ascending stream order.
    """
    if n_paths < 1:
        raise ConfigError("n_paths must be >= 1")
    if coeffs.d != config.d:
        raise ConfigError("config.x0 dimension does not match the coefficient set")
    size = block_size or _default_block_size(config, coeffs, record)
    starts = list(range(0, n_paths, size))
    id_blocks = [
        np.arange(first_stream + s, first_stream + min(s + size, n_paths), dtype=np.int64)
        for s in starts
    ]

    def task(ids):
        dw = _block_increments(config, coeffs.m, ids)
        return _simulate_block(coeffs, config, dw, record)

    if workers and workers > 1 and len(id_blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(task, id_blocks))
    else:
        results = [task(ids) for ids in id_blocks]

    def cat(key):
        vals = [r[key] for r in results]
        if vals[0] is None:
            return None
        return np.concatenate(vals, axis=0)

    merged = EnsembleResult(
        config=config,
        stream_ids=np.concatenate(id_blocks),
        final_states=cat("final_states"),
        diverged_step=cat("diverged_step"),
        final_jacobians=cat("final_jacobians"),
        final_inverses=cat("final_inverses"),
        sup_abs=cat("sup_abs"),
        flow_identity_sup=cat("flow_identity_sup"),
        states=cat("states"),
        jacobians=cat("jacobians"),
        inverses=cat("inverses"),
        increments=cat("increments"),
    )
    for idx in record.c_checkpoints:
        merged.c_at[idx] = np.concatenate([r["c_at"][idx] for r in results], axis=0)
        merged.j_at[idx] = np.concatenate([r["j_at"][idx] for r in results], axis=0)
    return merged


def _check_grid(coeffs: CoefficientSet, config: SimConfig, grid: BrownianGrid) -> None:
    if grid.m != coeffs.m:
        raise ConfigError(f"grid has m={grid.m}, coefficients have m={coeffs.m}")
    if grid.n_steps != config.n_steps:
        raise ConfigError("grid step count does not match the configuration")
    if not math.isclose(grid.horizon, config.horizon, rel_tol=1e-12):
        raise ConfigError("grid horizon does not match the configuration")


def simulate_x(coeffs: CoefficientSet, config: SimConfig, grid: BrownianGrid) -> Trajectory:
    """Simulate one state path on the given grid; raises on divergence."""
    _check_grid(coeffs, config, grid)
    out = _simulate_block(
        coeffs,
        config,
        grid.increments[None],
        RecordSpec(flows=False, store_states=True),
    )
    step = int(out["diverged_step"][0])
    if step >= 0:
        # max-abs: a Euclidean norm of a barely-finite state can overflow
        magnitude = float(np.max(np.abs(out["final_states"][0])))
        raise SimulationDiverged(config.scheme, step, magnitude)
    return Trajectory(config.times(), out["states"][0])


def simulate_flow(
    coeffs: CoefficientSet,
    config: SimConfig,
    grid: BrownianGrid,
    trajectory: Trajectory,
) -> FlowTrajectory:
    """Integrate the J and K flows along a frozen state path."""
    _check_grid(coeffs, config, grid)
    n, d = config.n_steps, coeffs.d
    if trajectory.states.shape != (n + 1, d):
        raise ConfigError("trajectory does not match the configuration")
    gb_path = compile_jacobian(coeffs.drift)(trajectory.states)
    gs_path = compile_diffusion_jacobians(coeffs)(trajectory.states)
    h = config.h
    jacobians = np.empty((n + 1, d, d))
    inverses = np.empty((n + 1, d, d))
    jacobians[0] = np.eye(d)
    inverses[0] = np.eye(d)
    j = jacobians[0][None].copy()
    k_inv = inverses[0][None].copy()
    with np.errstate(all="ignore"):
        for k in range(n):
            j, k_inv = _flow_step(
                j, k_inv, gb_path[k][None], gs_path[k][None], grid.increments[k][None], h
            )
            if not (np.isfinite(j).all() and np.isfinite(k_inv).all()):
                raise SimulationDiverged(config.scheme, k, float(np.linalg.norm(j)))
            jacobians[k + 1] = j[0]
            inverses[k + 1] = k_inv[0]
    return FlowTrajectory(config.times(), jacobians, inverses)


def malliavin_derivative(
    s_index: int,
    t_index: int,
    flow: FlowTrajectory,
    trajectory: Trajectory,
    coeffs: CoefficientSet,
) -> np.ndarray:
    """Sensitivity of X(t) to the noise at time s: J(t) K(s) sigma(X(s))."""
    if s_index > t_index:
        raise ConfigError("need s_index <= t_index")
    sig = coeffs.sigma_at(trajectory.states[s_index])
    if s_index == t_index:
        # the relative flow at equal times is the identity exactly
        return sig
    return flow.jacobians[t_index] @ flow.inverses[s_index] @ sig


def malliavin_matrices(
    flow: FlowTrajectory,
    trajectory: Trajectory,
    coeffs: CoefficientSet,
    t_index: int,
) -> MalliavinPair:
    """Left-endpoint quadrature of the covariance flow up to ``t_index``."""
    if not 0 <= t_index <= trajectory.n_steps:
        raise ConfigError("t_index out of range")
    h = trajectory.times[1] - trajectory.times[0] if trajectory.n_steps else 0.0
    d = trajectory.dim
    if t_index == 0:
        c = np.zeros((d, d))
    else:
        sig_path = compile_diffusion(coeffs)(trajectory.states[:t_index])
        ks = np.einsum("tij,tjm->tim", flow.inverses[:t_index], sig_path)
        c = h * np.einsum("tim,tjm->ij", ks, ks)
    c = 0.5 * (c + c.T)
    jt = flow.jacobians[t_index]
    q = jt @ c @ jt.T
    q = 0.5 * (q + q.T)
    return MalliavinPair(float(trajectory.times[t_index]), c, q)


def malliavin_checkpoint_ensemble(
    coeffs: CoefficientSet,
    config: SimConfig,
    n_paths: int,
    indices: Sequence[int],
    workers: int = 1,
    first_stream: int = 0,
) -> tuple[EnsembleResult, dict[int, tuple[np.ndarray, np.ndarray]]]:
    """Per-path C and Q matrices at the requested grid indices.

    Returns the raw ensemble result plus ``{index: (C, Q)}`` with per-path
    matrices symmetrised after assembly.
    """
    idx = tuple(sorted(set(int(i) for i in indices)))
    for i in idx:
        if not 0 <= i <= config.n_steps:
            raise ConfigError(f"checkpoint index {i} outside the grid")
    res = run_ensemble(
        coeffs,
        config,
        n_paths,
        RecordSpec(flows=True, c_checkpoints=idx),
        workers=workers,
        first_stream=first_stream,
    )
    out = {}
    for i in idx:
        c = res.c_at[i]
        c = 0.5 * (c + np.swapaxes(c, 1, 2))
        jmat = res.j_at[i]
        q = np.einsum("bij,bjk,blk->bil", jmat, c, jmat)
        q = 0.5 * (q + np.swapaxes(q, 1, 2))
        out[i] = (c, q)
    return res, out


def replace_config(config: SimConfig, **kwargs) -> SimConfig:
    return replace(config, **kwargs)
