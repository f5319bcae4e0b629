"""Girsanov weights, weighted semigroup estimates and weight diagnostics.

Weights stay in log space; every reduction shifts by the maximum log-weight
before exponentiating, so an all-zero log-weight vector reproduces the plain
Monte Carlo mean bit for bit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import paths
from .integrate import TrajectoryBatch, WeightedTrajectory, cumulative_log_weight


class WeightError(ValueError):
    pass


@dataclass(frozen=True)
class WeightedEstimate:
    value: float
    std_error: float
    ess: float
    n_used: int
    n_excluded: int = 0
    self_normalized: bool = False
    clip: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def log_weight(traj, t: float):
    """``log R(t)`` for a :class:`WeightedTrajectory` (scalar) or a batch (array)."""
    if isinstance(traj, TrajectoryBatch):
        if not traj.weighted:
            raise WeightError("batch was simulated without weights")
        return traj.log_weight_at(t)
    if traj.z_values is None or traj.z_values.shape[0] == 0:
        raise WeightError("trajectory carries no drift evaluations")
    n_steps = traj.dW.shape[0]
    dt = traj.path.grid.dt
    k = paths.TimeGrid(0.0, dt, n_steps).index_of(t)
    return float(traj.log_weight_series[k])


def recompute_log_weights(traj: WeightedTrajectory) -> np.ndarray:
    """Running log-weight rebuilt from the stored ``z_values`` and ``dW``."""
    return cumulative_log_weight(traj.z_values, traj.dW, traj.path.grid.dt)


def state_function(g: Callable[[np.ndarray], np.ndarray]):
    """Lift ``g`` on ``(n, d)`` states to a function of segments (reads ``theta = 0``)."""
    return lambda seg: g(seg[:, -1, :])


def _usable(batch: TrajectoryBatch, lw: np.ndarray):
    ok = ~batch.flagged & np.isfinite(lw)
    if not ok.any():
        raise WeightError("no usable trajectories: all flagged or non-finite")
    return ok


def weighted_mean(values: np.ndarray, lw: np.ndarray, self_normalized: bool = False,
                  clip: Optional[float] = None):
    """``(value, std_error, ess)`` of ``mean(exp(lw) * values)``.

    With ``self_normalized`` the weights are divided by their sum (delta-method
    standard error).  ``clip`` caps each weight ``exp(lw)`` at ``clip``.
    """
    n = values.shape[0]
    shift = float(np.max(lw))
    w = np.exp(lw - shift)
    if clip is not None:
        w = np.minimum(w, clip * np.exp(-shift))
    ess = float(np.sum(w) ** 2 / np.sum(w * w))
    if self_normalized:
        v = float(np.sum(w * values) / np.sum(w))
        se = float(np.sqrt(np.sum((w * (values - v)) ** 2)) / np.sum(w))
        return v, se, ess
    scale = np.exp(shift)
    wf = w * values
    v = float(np.mean(wf)) * scale
    se = float(np.std(wf, ddof=1) / np.sqrt(n)) * scale if n > 1 else float("inf")
    return v, se, ess


def weighted_expectation(batch: TrajectoryBatch, f: Callable[[np.ndarray], np.ndarray], t: float,
                         self_normalized: bool = False, clip: Optional[float] = None) -> WeightedEstimate:
    """Estimate ``E[f(X_t) R(t)]``.

    ``f`` maps a batch of segment values ``(n, lag + 1, d)`` to ``(n,)``.
    Batches simulated without weights are treated as having ``R = 1``, which
    gives the plain Monte Carlo estimator used for perturbed-direct oracles.
    """
    if t < 0:
        raise paths.GridError("t must be nonnegative")
    lw = batch.log_weight_at(t)
    ok = _usable(batch, lw)
    seg = batch.segments_at(t)[ok]
    vals = np.asarray(f(seg), dtype=float).reshape(-1)
    v, se, ess = weighted_mean(vals, lw[ok], self_normalized, clip)
    return WeightedEstimate(v, se, ess, int(ok.sum()), int((~ok).sum()), self_normalized, clip)


@dataclass
class MartingaleReport:
    times: list
    mean_weight: list
    std_error: list
    z_score: list
    ess: list
    low_ess: list
    passed: bool
    n_excluded: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def martingale_check(batch: TrajectoryBatch, times, z_max: float = 3.0,
                     min_ess: float = 30.0) -> MartingaleReport:
    """Test ``E R(t) = 1`` at each time.

    Times whose weight ESS falls below ``min_ess`` are reported as low-ESS and
    do not count as failures.
    """
    means, ses, zs, esss, low = [], [], [], [], []
    excluded = 0
    for t in times:
        lw = batch.log_weight_at(t)
        ok = _usable(batch, lw)
        excluded = max(excluded, int((~ok).sum()))
        v, se, ess = weighted_mean(np.ones(int(ok.sum())), lw[ok])
        if se > 0:
            z = (v - 1.0) / se
        else:
            z = 0.0 if v == 1.0 else float("inf")
        means.append(v)
        ses.append(se)
        zs.append(float(z))
        esss.append(ess)
        low.append(bool(ess < min_ess))
    passed = all(abs(z) <= z_max or lo for z, lo in zip(zs, low))
    return MartingaleReport(list(map(float, times)), means, ses, zs, esss, low, passed, excluded)


def integrability_diagnostic(batch: TrajectoryBatch, threshold: float) -> dict:
    """Distribution of ``int_0^T |Z(X_s)|^2 ds`` over trajectories."""
    ints = batch.integrated_z_sq()[~batch.flagged]
    n = ints.size
    q = np.quantile(ints, [0.5, 0.9, 0.99]) if n else [np.nan] * 3
    return {
        "horizon": batch.horizon,
        "n": int(n),
        "mean": float(ints.mean()) if n else float("nan"),
        "std_error": float(ints.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf"),
        "max": float(ints.max()) if n else float("nan"),
        "quantiles": {"0.5": float(q[0]), "0.9": float(q[1]), "0.99": float(q[2])},
        "threshold": float(threshold),
        "fraction_exceeding": float(np.mean(ints > threshold)) if n else float("nan"),
        "integrals": ints,
    }
