"""Time grids, sampled paths and delay-window segments.

A segment is the window ``xi(theta) = X(t + theta)`` for ``theta`` in
``[-tau, 0]``, sampled on the simulation grid.  Delay horizons must be exact
integer multiples of the grid step so that segment extraction never
interpolates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ALIGN_TOL = 1e-9


class GridError(ValueError):
    """A time or delay is not aligned with the grid, or lies outside it."""


def steps_for(length: float, dt: float) -> int:
    """Number of grid steps spanning ``length``; raises unless exact."""
    if dt <= 0:
        raise GridError(f"dt must be positive, got {dt}")
    if length < 0:
        raise GridError(f"length must be nonnegative, got {length}")
    k = int(round(length / dt))
    if abs(k * dt - length) > _ALIGN_TOL * max(1.0, abs(length)):
        raise GridError(f"{length} is not an integer multiple of dt={dt}")
    return k


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise GridError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 0:
            raise GridError(f"n_steps must be nonnegative, got {self.n_steps}")

    def node(self, k: int) -> float:
        # computed directly, never by repeated addition
        return self.t_start + k * self.dt

    def nodes(self) -> np.ndarray:
        return self.t_start + np.arange(self.n_steps + 1) * self.dt

    @property
    def t_end(self) -> float:
        return self.node(self.n_steps)

    def index_of(self, t: float) -> int:
        k = int(round((t - self.t_start) / self.dt))
        if abs(self.node(k) - t) > _ALIGN_TOL * max(1.0, abs(t)):
            raise GridError(f"t={t} is not a grid node")
        if not 0 <= k <= self.n_steps:
            raise GridError(f"t={t} outside [{self.t_start}, {self.t_end}]")
        return k


@dataclass(frozen=True)
class Path:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.n_steps + 1:
            raise ValueError(
                f"expected {self.grid.n_steps + 1} state vectors, got shape {v.shape}"
            )
        object.__setattr__(self, "values", _frozen(v))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def at(self, t: float) -> np.ndarray:
        return self.values[self.grid.index_of(t)]


@dataclass(frozen=True)
class Segment:
    """States at ``theta = -tau, -tau + dt, ..., 0`` (oldest first)."""

    tau: float
    dt: float
    values: np.ndarray

    def __post_init__(self):
        lag = steps_for(self.tau, self.dt)
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != lag + 1:
            raise ValueError(f"tau={self.tau}, dt={self.dt} needs {lag + 1} values, got {v.shape}")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def constant(cls, x, tau: float, dt: float) -> "Segment":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lag = steps_for(tau, dt)
        return cls(tau, dt, np.broadcast_to(x, (lag + 1, x.size)))

    @property
    def lag(self) -> int:
        return self.values.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def thetas(self) -> np.ndarray:
        return (np.arange(self.lag + 1) - self.lag) * self.dt

    def at(self, theta: float) -> np.ndarray:
        return eval_segment(self, theta)


def segment_at(path: Path, t: float, tau: float) -> Segment:
    """The window of ``path`` ending at ``t`` with length ``tau``."""
    lag = steps_for(tau, path.grid.dt)
    k = path.grid.index_of(t)
    if k - lag < 0:
        raise GridError(f"window [{t - tau}, {t}] starts before the path at {path.grid.t_start}")
    return Segment(tau, path.grid.dt, path.values[k - lag : k + 1].copy())


def eval_segment(seg: Segment, theta: float) -> np.ndarray:
    """Piecewise-linear evaluation at ``theta`` in ``[-tau, 0]``; exact at nodes."""
    if not -seg.tau - _ALIGN_TOL <= theta <= _ALIGN_TOL:
        raise GridError(f"theta={theta} outside [-{seg.tau}, 0]")
    if seg.lag == 0:
        return seg.values[0].copy()
    u = (theta + seg.tau) / seg.dt
    i = int(np.floor(u))
    i = min(max(i, 0), seg.lag - 1)
    frac = u - i
    if abs(frac) < _ALIGN_TOL:
        return seg.values[i].copy()
    if abs(frac - 1.0) < _ALIGN_TOL:
        return seg.values[i + 1].copy()
    return (1.0 - frac) * seg.values[i] + frac * seg.values[i + 1]


class SegmentRing:
    """Rolling delay windows for a batch of trajectories.

    Each state is written twice, at ``p`` and ``p + L``, so the current window
    is always the contiguous view ``buf[:, p:p + L]``.  Updates are O(1) per
    trajectory and reading a window never copies.
    """

    def __init__(self, init: np.ndarray):
        init = np.asarray(init, dtype=float)
        if init.ndim != 3:
            raise ValueError("init must have shape (n, L, d)")
        n, L, d = init.shape
        self.length = L
        self._buf = np.empty((n, 2 * L, d))
        self._buf[:, :L] = init
        self._buf[:, L:] = init
        self._p = 0

    def window(self) -> np.ndarray:
        return self._buf[:, self._p : self._p + self.length]

    def newest(self) -> np.ndarray:
        return self._buf[:, self._p + self.length - 1]

    def push(self, x: np.ndarray) -> None:
        self._buf[:, self._p] = x
        self._buf[:, self._p + self.length] = x
        self._p = (self._p + 1) % self.length

    def reorder(self, idx: np.ndarray) -> None:
        """Replace trajectory ``i`` by trajectory ``idx[i]`` (resampling)."""
        self._buf = self._buf[idx]
