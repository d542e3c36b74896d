"""Brownian paths on uniform grids with counter-based, per-stream keying.

Randomness comes from Philox (counter-based) generators keyed by
``(seed, stream_id)`` with the counter block selecting the purpose: block 0
holds the base increments, block ``level`` the bridge midpoints used to
refine a level ``level - 1`` grid.  Every draw is therefore a pure function
of ``(seed, stream_id, purpose)``: regenerating a grid, refining it, or
coarsening it back is bit-reproducible regardless of worker scheduling.

The stored object is the path W(t_k); increments are its differences.  A
bridge refinement copies the coarse path values onto the even fine indices,
so coarsening (taking every second path value) undoes it bit-exactly and
the coarse increments are preserved exactly.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError

__all__ = [
    "BrownianGrid",
    "sample_brownian",
    "standard_normal_stream",
    "stream_increments",
]

_LOCAL = threading.local()


def standard_normal_stream(seed: int, stream_id: int, purpose: int, shape) -> np.ndarray:
    """Standard normals from the Philox stream keyed by (seed, stream, purpose).

    One generator per thread is rekeyed in place: constructing a fresh
    Philox per stream costs an order of magnitude more and produces the
    same bits.
    """
    gen = getattr(_LOCAL, "gen", None)
    if gen is None:
        _LOCAL.bitgen = np.random.Philox(key=np.zeros(2, dtype=np.uint64))
        _LOCAL.gen = gen = np.random.Generator(_LOCAL.bitgen)
        _LOCAL.state = _LOCAL.bitgen.state
    bitgen, state = _LOCAL.bitgen, _LOCAL.state
    inner = state["state"]
    inner["counter"][:] = 0
    inner["counter"][2] = purpose
    inner["key"][0] = seed
    inner["key"][1] = stream_id
    state["buffer_pos"] = 4  # mark the output buffer exhausted
    state["has_uint32"] = 0
    state["uinteger"] = 0
    bitgen.state = state
    return gen.standard_normal(shape)


def _stream_path(seed: int, stream_id: int, n: int, m: int, h: float) -> np.ndarray:
    draws = standard_normal_stream(seed, stream_id, 0, (n, m)) * math.sqrt(h)
    path = np.zeros((n + 1, m))
    np.cumsum(draws, axis=0, out=path[1:])
    return path


def stream_increments(seed: int, stream_id: int, n: int, m: int, h: float) -> np.ndarray:
    """Increments of the stream's path; bit-identical to sample_brownian's."""
    return np.diff(_stream_path(seed, stream_id, n, m, h), axis=0)


@dataclass(frozen=True, slots=True)
class BrownianGrid:
    """An m-dimensional Brownian path sampled on a uniform grid.

    ``path[k, j]`` is W^{j+1}(t_k) with W(0) = 0; increments have variance h
    per component.  ``level`` counts bridge refinements applied on top of
    the base sampling.
    """

    m: int
    horizon: float
    path: np.ndarray  # (n_steps + 1, m)
    seed: int
    stream_id: int
    level: int = 0

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if self.path.ndim != 2 or self.path.shape[1] != self.m:
            raise ConfigError("path must have shape (n_steps + 1, m)")
        if self.path.shape[0] < 2:
            raise ConfigError("need at least one step")
        if np.any(self.path[0] != 0.0):
            raise ConfigError("path must start at zero")
        self.path.setflags(write=False)

    @property
    def n_steps(self) -> int:
        return self.path.shape[0] - 1

    @property
    def h(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.h

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.path, axis=0)

    def refine(self) -> "BrownianGrid":
        """Halve the step by inserting bridge midpoints.

        Coarse path values are copied onto the even fine indices, so the
        coarse increments are preserved exactly and :meth:`coarsen` is a
        bitwise inverse.
        """
        n = self.n_steps
        noise = standard_normal_stream(
            self.seed, self.stream_id, self.level + 1, (n, self.m)
        )
        mid = 0.5 * (self.path[:-1] + self.path[1:]) + (0.5 * math.sqrt(self.h)) * noise
        fine = np.empty((2 * n + 1, self.m))
        fine[0::2] = self.path
        fine[1::2] = mid
        return BrownianGrid(
            self.m, self.horizon, fine, self.seed, self.stream_id, self.level + 1
        )

    def coarsen(self) -> "BrownianGrid":
        """Drop the odd grid points; inverse of :meth:`refine`."""
        if self.n_steps % 2 != 0:
            raise ConfigError("cannot coarsen a grid with an odd number of steps")
        coarse = self.path[0::2].copy()
        return BrownianGrid(
            self.m, self.horizon, coarse, self.seed, self.stream_id, max(self.level - 1, 0)
        )


def sample_brownian(config, m: int, stream_id: int = 0) -> BrownianGrid:
    """Draw the grid for one stream of the configured simulation.

    Deterministic given ``(config.seed, stream_id)``; increments are
    N(0, h I_m) per step.
    """
    if m < 1:
        raise ConfigError("m must be >= 1")
    path = _stream_path(config.seed, stream_id, config.n_steps, m, config.h)
    return BrownianGrid(m, config.horizon, path, config.seed, stream_id)
