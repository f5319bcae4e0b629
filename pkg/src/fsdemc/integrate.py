"""Euler–Maruyama simulation of reference and perturbed path-dependent SDEs.

Three modes are supported:

``reference``
    ``dX = Z0(X) dt + sigma(X) dW``.
``perturbed-direct``
    ``dX = (Z0(X) + sigma(X) Z(X_t)) dt + sigma(X) dW``.
``reference-with-weights``
    reference dynamics, with ``Z`` evaluated on the reference segment at the
    left endpoint of each step and the Girsanov log-weight
    ``sum <z_k, dW_k> - 1/2 sum |z_k|^2 dt`` accumulated alongside.

Trajectories are split into fixed-size blocks that are simulated
independently, so the worker count only changes how blocks are scheduled and
never the numbers produced.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Optional

import numpy as np

from . import paths, rng
from .models import ModelSpec, PathDrift

MODES = ("reference", "perturbed-direct", "reference-with-weights")


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float
    horizon: float
    n_traj: int
    seed: int
    mode: str = "reference"
    threads: int = 1
    # record every k-th node (None: keep only the initial and final windows)
    record_stride: Optional[int] = 1
    store_noise: bool = True
    block_size: int = 4096
    noise_chunk: int = 256

    def __post_init__(self):
        if self.mode not in MODES:
            raise SimulationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.seed is None:
            raise SimulationError("seed is mandatory")
        if self.n_traj < 1:
            raise SimulationError("n_traj must be positive")
        if self.threads < 1:
            raise SimulationError("threads must be positive")
        if self.record_stride is not None and self.record_stride < 1:
            raise SimulationError("record_stride must be positive")
        paths.steps_for(self.horizon, self.dt)

    @property
    def n_steps(self) -> int:
        return paths.steps_for(self.horizon, self.dt)

    @property
    def weighted(self) -> bool:
        return self.mode == "reference-with-weights"


def log_weight_increment(z: np.ndarray, dw: np.ndarray, dt: float) -> np.ndarray:
    """``<z, dW> - |z|^2 dt / 2`` along the last axis."""
    return np.sum(z * dw, axis=-1) - 0.5 * np.sum(z * z, axis=-1) * dt


def cumulative_log_weight(z: np.ndarray, dw: np.ndarray, dt: float) -> np.ndarray:
    """Running log-weight at nodes ``0..N`` from ``(..., N, m)`` inputs."""
    inc = log_weight_increment(z, dw, dt)
    out = np.zeros(inc.shape[:-1] + (inc.shape[-1] + 1,))
    np.cumsum(inc, axis=-1, out=out[..., 1:])
    return out


def _sigma_mul(model: ModelSpec, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    if model.sigma_matrix is not None:
        return v @ model.sigma_matrix.T
    return np.einsum("nij,nj->ni", model.sigma(x), v)


class Stepper:
    """Advance one block of trajectories step by step.

    Trajectory slot ``j`` draws its noise from the Philox stream
    ``(noise_seed, ids[j])``; resampling moves states between slots but
    each slot keeps its stream.
    """

    def __init__(self, model: ModelSpec, Z: Optional[PathDrift], windows: np.ndarray, dt: float,
                 mode: str, noise_seed: int, ids, chunk: int = 256):
        self.model, self.Z, self.dt, self.mode = model, Z, dt, mode
        self.ring = paths.SegmentRing(windows)
        self.n = windows.shape[0]
        self.log_w = np.zeros(self.n)
        self.z_sq = np.zeros(self.n)
        self.flagged = np.zeros(self.n, dtype=bool)
        self._gens = [rng.stream(noise_seed, int(i)) for i in ids]
        self._chunk = chunk
        self._noise = None
        self._pos = chunk
        self._sqdt = np.sqrt(dt)
        self.needs_z = Z is not None and mode != "reference"

    def _draw(self) -> np.ndarray:
        if self._pos == self._chunk:
            self._noise = rng.normals(self._gens, (self._chunk, self.model.m))
            self._pos = 0
        dw = self._noise[:, self._pos] * self._sqdt
        self._pos += 1
        return dw

    def window(self) -> np.ndarray:
        return self.ring.window()

    def step(self):
        """Return ``(x_new, dW, z)``; ``z`` is None when Z is not evaluated."""
        x = self.ring.newest().copy()
        dw = self._draw()
        z = None
        # overflow is caught below and flagged, so silence the warnings here
        with np.errstate(all="ignore"):
            dx = self.model.drift(x) * self.dt
            if self.needs_z:
                z = np.asarray(self.Z.apply(self.ring.window()), dtype=float)
                if self.mode == "perturbed-direct":
                    dx = dx + _sigma_mul(self.model, x, z) * self.dt
                else:
                    self.log_w = self.log_w + log_weight_increment(z, dw, self.dt)
                    self.z_sq = self.z_sq + np.sum(z * z, axis=-1)
            x_new = x + dx + _sigma_mul(self.model, x, dw)
        bad = ~np.all(np.isfinite(x_new), axis=1)
        if self.mode == "reference-with-weights":
            bad |= ~np.isfinite(self.log_w)
        if bad.any() or self.flagged.any():
            self.flagged |= bad
            x_new[self.flagged] = x[self.flagged]
        self.ring.push(x_new)
        return x_new, dw, z

    def reorder(self, idx: np.ndarray) -> None:
        self.ring.reorder(idx)
        self.z_sq = self.z_sq[idx]
        self.flagged = self.flagged[idx]


@dataclass
class WeightedTrajectory:
    path: paths.Path
    dW: np.ndarray
    z_values: np.ndarray
    log_weight_series: np.ndarray
    flagged: bool = False


@dataclass
class TrajectoryBatch:
    """Simulated trajectories in index order.

    ``paths[i, j]`` is the state at node ``j * record_stride`` (node 0 is
    time 0); ``init`` holds the initial windows and ``final_window`` the
    windows at the horizon.  ``log_weights`` is recorded at the same nodes as
    ``paths``.
    """

    model_name: str
    mode: str
    dt: float
    tau: float
    horizon: float
    seed: int
    record_stride: Optional[int]
    init: np.ndarray
    final_window: np.ndarray
    final_log_weight: np.ndarray
    z_sq_sum: np.ndarray
    flagged: np.ndarray
    paths: Optional[np.ndarray] = None
    log_weights: Optional[np.ndarray] = None
    dW: Optional[np.ndarray] = None
    z_values: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.init.shape[0]

    @property
    def n_steps(self) -> int:
        return paths.steps_for(self.horizon, self.dt)

    @property
    def lag(self) -> int:
        return self.init.shape[1] - 1

    @property
    def weighted(self) -> bool:
        return self.mode == "reference-with-weights"

    @property
    def n_flagged(self) -> int:
        return int(self.flagged.sum())

    def _node(self, t: float) -> int:
        return paths.TimeGrid(0.0, self.dt, self.n_steps).index_of(t)

    def _recorded_index(self, k: int) -> int:
        if self.record_stride is None or k % self.record_stride:
            raise paths.GridError(f"node {k} was not recorded")
        return k // self.record_stride

    def states_at(self, t: float) -> np.ndarray:
        k = self._node(t)
        if k == self.n_steps:
            return self.final_window[:, -1]
        if k == 0:
            return self.init[:, -1]
        return self.paths[:, self._recorded_index(k)]

    def segments_at(self, t: float) -> np.ndarray:
        """Windows ``X_t`` for every trajectory, shape ``(n, lag + 1, d)``."""
        k = self._node(t)
        if k == self.n_steps:
            return self.final_window
        if k == 0:
            return self.init
        if self.lag == 0:
            return self.paths[:, self._recorded_index(k)][:, None, :]
        full = self._full_paths()
        return full[:, k : k + self.lag + 1]

    def log_weight_at(self, t: float) -> np.ndarray:
        k = self._node(t)
        if not self.weighted or k == 0:
            return np.zeros(self.n)
        if k == self.n_steps:
            return self.final_log_weight
        if self.log_weights is None:
            raise paths.GridError("log-weights were not recorded")
        return self.log_weights[:, self._recorded_index(k)]

    def integrated_z_sq(self) -> np.ndarray:
        """Per-trajectory ``sum_k |z_k|^2 dt`` over the horizon."""
        return self.z_sq_sum * self.dt

    def _full_paths(self) -> np.ndarray:
        if self.record_stride != 1 or self.paths is None:
            raise paths.GridError("full paths need record_stride = 1")
        return np.concatenate([self.init[:, :-1], self.paths], axis=1)

    def trajectory(self, i: int) -> WeightedTrajectory:
        full = self._full_paths()
        grid = paths.TimeGrid(-self.tau, self.dt, full.shape[1] - 1)
        m = self.info.get("m", 0)
        if self.dW is None:
            raise SimulationError("noise increments were not stored")
        z = self.z_values[i] if self.z_values is not None else np.zeros((0, m))
        lw = self.log_weights[i] if self.weighted else np.zeros(self.n_steps + 1)
        return WeightedTrajectory(paths.Path(grid, full[i]), self.dW[i], z, lw, bool(self.flagged[i]))


def _resolve_init(model: ModelSpec, init, n: int, lag: int, seed: int, threads: int) -> np.ndarray:
    L = lag + 1
    if init is None:
        return sample_mu(model, n, None, seed, threads=threads, lag=lag)
    if isinstance(init, paths.Segment):
        if init.lag != lag:
            raise SimulationError(f"initial segment has {init.lag} lags, model needs {lag}")
        if init.dim != model.d:
            raise SimulationError("initial segment dimension does not match the model")
        return np.broadcast_to(init.values, (n, L, model.d)).copy()
    a = np.asarray(init, dtype=float)
    if a.ndim == 1:
        a = np.broadcast_to(a, (n, model.d))
    if a.ndim == 2:
        a = np.repeat(a[:, None, :], L, axis=1) if a.shape[0] == n else None
    if a is None or a.shape != (n, L, model.d):
        raise SimulationError(f"initial data must broadcast to {(n, L, model.d)}")
    return np.array(a)


def _check_drift(model: ModelSpec, Z: Optional[PathDrift]):
    if Z is None:
        return
    if Z.m != model.m:
        raise SimulationError(f"drift has dimension {Z.m}, model noise dimension is {model.m}")
    if Z.tau > 0 and abs(Z.tau - model.tau) > 1e-12:
        raise SimulationError(f"drift window tau={Z.tau} differs from model tau={model.tau}")


def run_blocks(fn, n: int, block_size: int, threads: int):
    """Apply ``fn(lo, hi)`` over fixed trajectory blocks, results in order."""
    bounds = [(lo, min(lo + block_size, n)) for lo in range(0, n, block_size)]
    if threads == 1 or len(bounds) == 1:
        return [fn(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))


def simulate(model: ModelSpec, Z: Optional[PathDrift], init, cfg: SimConfig) -> TrajectoryBatch:
    """Simulate ``cfg.n_traj`` trajectories; see the module docstring for modes.

    ``init`` is a :class:`Segment` shared by all trajectories, an array of
    per-trajectory windows ``(n, lag + 1, d)`` or states ``(n, d)``, or None
    to draw initial segments from the reference measure mu.
    """
    lag = paths.steps_for(model.tau, cfg.dt)
    _check_drift(model, Z)
    Z_eff = Z
    n, N = cfg.n_traj, cfg.n_steps
    init_w = _resolve_init(model, init, n, lag, rng.derive_seed(cfg.seed, "init"), cfg.threads)
    noise_seed = rng.derive_seed(cfg.seed, "noise")
    stride = cfg.record_stride
    n_rec = 0 if stride is None else N // stride + 1
    m = model.m
    keep_z = cfg.weighted and Z_eff is not None and cfg.store_noise

    def block(lo, hi):
        st = Stepper(model, Z_eff, init_w[lo:hi], cfg.dt, cfg.mode, noise_seed, range(lo, hi),
                     cfg.noise_chunk)
        B = hi - lo
        rec = np.empty((B, n_rec, model.d)) if n_rec else None
        lw = np.zeros((B, n_rec)) if n_rec and cfg.weighted else None
        dws = np.empty((B, N, m)) if cfg.store_noise else None
        zs = np.zeros((B, N, m)) if keep_z else None
        if rec is not None:
            rec[:, 0] = init_w[lo:hi, -1]
        for k in range(N):
            x_new, dw, z = st.step()
            if dws is not None:
                dws[:, k] = dw
            if zs is not None:
                zs[:, k] = z
            if rec is not None and (k + 1) % stride == 0:
                j = (k + 1) // stride
                rec[:, j] = x_new
                if lw is not None:
                    lw[:, j] = st.log_w
        return (st.window().copy(), st.log_w, st.z_sq, st.flagged, rec, lw, dws, zs)

    parts = run_blocks(block, n, cfg.block_size, cfg.threads)

    def cat(i):
        if parts[0][i] is None:
            return None
        return np.concatenate([p[i] for p in parts], axis=0)

    flagged = cat(3)
    info = {"n_flagged": int(flagged.sum()), "blowup_fraction": float(flagged.mean()), "m": m,
            "n_steps": N}
    return TrajectoryBatch(
        model_name=model.name, mode=cfg.mode, dt=cfg.dt, tau=model.tau, horizon=cfg.horizon,
        seed=cfg.seed, record_stride=stride, init=init_w, final_window=cat(0),
        final_log_weight=cat(1), z_sq_sum=cat(2), flagged=flagged, paths=cat(4),
        log_weights=cat(5), dW=cat(6), z_values=cat(7), info=info,
    )


def sample_mu0(model: ModelSpec, n: int, seed: int, return_info: bool = False):
    """``n`` draws from mu0 (exact, or Metropolis for non-Gaussian models)."""
    if model.mu0_sampler is None:
        raise SimulationError(f"model {model.name} has no mu0 sampler")
    x, info = model.mu0_sampler(int(n), rng.generator(seed, "mu0"))
    x = np.asarray(x, dtype=float).reshape(n, model.d)
    return (x, info) if return_info else x


def sample_mu(model: ModelSpec, n: int, dt: Optional[float], seed: int, threads: int = 1,
              lag: Optional[int] = None) -> np.ndarray:
    """Segments ``X_tau`` of the reference dynamics started from mu0.

    Returns shape ``(n, lag + 1, d)``; for ``tau = 0`` these are mu0 draws.
    """
    x0 = sample_mu0(model, n, rng.derive_seed(seed, "mu0"))
    if lag is None:
        lag = 0 if model.tau == 0 else paths.steps_for(model.tau, dt)
    if lag == 0:
        return x0[:, None, :]
    dt = model.tau / lag
    cfg = SimConfig(dt=dt, horizon=model.tau, n_traj=n, seed=rng.derive_seed(seed, "mu"),
                    mode="reference", threads=threads, record_stride=None, store_noise=False)
    batch = simulate(model, None, np.repeat(x0[:, None, :], lag + 1, axis=1), cfg)
    return batch.final_window


# ---------------------------------------------------------------------------
# binary trajectory dump


def dump_trajectories(batch: TrajectoryBatch, prefix) -> tuple:
    """Write ``<prefix>.bin`` (little-endian float64, [traj][node][coord]) and
    ``<prefix>.json`` describing it.  Returns the two paths."""
    prefix = FsPath(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    if batch.record_stride == 1:
        data = batch._full_paths()
        t_start, stride = -batch.tau, 1
    elif batch.paths is not None:
        data = batch.paths
        t_start, stride = 0.0, batch.record_stride
    else:
        data = batch.final_window
        t_start, stride = batch.horizon - batch.tau, 1
    bin_path = prefix.with_suffix(".bin")
    json_path = prefix.with_suffix(".json")
    np.ascontiguousarray(data, dtype="<f8").tofile(bin_path)
    meta = {
        "format": "fsdemc-trajectories", "version": 1, "dtype": "<f8", "order": "C",
        "layout": ["trajectory", "node", "coordinate"], "shape": list(data.shape),
        "dt": batch.dt, "tau": batch.tau, "seed": batch.seed, "t_start": t_start,
        "node_stride": stride, "horizon": batch.horizon, "mode": batch.mode,
        "model": batch.model_name, "flagged": np.flatnonzero(batch.flagged).tolist(),
    }
    json_path.write_text(json.dumps(meta, indent=2))
    return bin_path, json_path


def load_trajectories(prefix):
    prefix = FsPath(prefix)
    meta = json.loads(prefix.with_suffix(".json").read_text())
    data = np.fromfile(prefix.with_suffix(".bin"), dtype="<f8").reshape(meta["shape"])
    return data, meta
