"""Weighted empirical measures, the Cesàro invariant-measure construction,
density-ratio estimation and the integral functionals used by the bounds.

Integrals against mu0 over a density grid use tensor trapezoid weights times
the mu0 density at the nodes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.signal
import scipy.special

from . import paths, rng
from .integrate import Stepper, run_blocks, sample_mu
from .models import ModelSpec, PathDrift, mu0_box

DENSITY_FLOOR = 1e-12
MASS_RANGE = (0.95, 1.05)
MIN_ATOMS = 100


class EstimationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# empirical measures


class SegmentAtoms:
    """Segments stored as overlapping windows of recorded path blocks.

    Each block is an array ``(B, L + s, d)`` whose first ``L`` columns are the
    windows at the block start; atom ``(b, k)`` (``k = 1..s``) is the window
    ending at column ``L - 1 + k``.  Atoms are ordered block by block, then
    trajectory-major within a block.
    """

    def __init__(self, blocks: Sequence[np.ndarray], L: int, dt: float):
        self.blocks = list(blocks)
        self.L = L
        self.dt = dt

    def __len__(self) -> int:
        return sum(b.shape[0] * (b.shape[1] - self.L) for b in self.blocks)

    @property
    def dim(self) -> int:
        return self.blocks[0].shape[2]

    def values_at(self, offset: int) -> np.ndarray:
        """States ``xi(-offset * dt)`` of every atom, shape ``(n, d)``."""
        if not 0 <= offset < self.L:
            raise paths.GridError(f"offset {offset} outside the window of {self.L} nodes")
        L = self.L
        parts = [b[:, L - offset : b.shape[1] - offset].reshape(-1, b.shape[2]) for b in self.blocks]
        return np.concatenate(parts, axis=0)

    def segments(self) -> np.ndarray:
        """Materialise all windows, shape ``(n, L, d)`` (memory heavy)."""
        L = self.L
        parts = []
        for b in self.blocks:
            w = np.lib.stride_tricks.sliding_window_view(b, L, axis=1)[:, 1:]
            parts.append(np.moveaxis(w, -1, 2).reshape(-1, L, b.shape[2]))
        return np.concatenate(parts, axis=0)


@dataclass
class WeightedEmpiricalMeasure:
    """Atoms with unnormalised log-weights; normalisation happens on query.

    ``atoms`` is ``(n, L, d)`` segments, ``(n, d)`` states or a
    :class:`SegmentAtoms`.  ``groups`` labels statistically dependent atoms
    (same trajectory or resampling island) for clustered standard errors.
    """

    atoms: object
    log_weights: np.ndarray
    groups: Optional[np.ndarray] = None
    dt: Optional[float] = None
    tau: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.log_weights = np.asarray(self.log_weights, dtype=float).reshape(-1)
        if len(self.atoms) != self.log_weights.size:
            raise EstimationError("atoms and log-weights differ in length")
        if self.groups is not None and np.asarray(self.groups).size != self.log_weights.size:
            raise EstimationError("groups and log-weights differ in length")

    def __len__(self) -> int:
        return self.log_weights.size

    @property
    def is_states(self) -> bool:
        return isinstance(self.atoms, np.ndarray) and self.atoms.ndim == 2

    def states(self) -> np.ndarray:
        if self.is_states:
            return self.atoms
        return marginal(self, 0.0).atoms

    def weights(self) -> np.ndarray:
        lw = self.log_weights
        finite = np.isfinite(lw)
        if not finite.any():
            raise EstimationError("all weights are zero or non-finite")
        out = lw - np.max(lw[finite]) if not finite.all() else lw - np.max(lw)
        np.exp(out, out=out)
        if not finite.all():
            out[~finite] = 0.0
        out /= np.sum(out)
        return out

    def ess(self) -> float:
        w = self.weights()
        return float(1.0 / np.sum(w * w))

    def expectation(self, values: np.ndarray):
        """Self-normalised mean of per-atom ``values`` with a clustered SE."""
        values = np.asarray(values, dtype=float).reshape(len(self), -1)
        w = self.weights()
        mean = w @ values
        resid = values - mean
        resid *= w[:, None]
        if self.groups is None:
            g_sums = resid
        else:
            g = np.asarray(self.groups)
            if g.min() < 0:
                g = np.unique(g, return_inverse=True)[1]
            g_sums = np.stack([np.bincount(g, weights=resid[:, j]) for j in range(resid.shape[1])], axis=1)
            g_sums = g_sums[np.bincount(g) > 0]
        G = g_sums.shape[0]
        se = np.sqrt(G / max(G - 1, 1) * np.sum(g_sums**2, axis=0))
        if values.shape[1] == 1:
            return float(mean[0]), float(se[0])
        return mean, se

    def moments(self, axis: int = 0) -> dict:
        """Mean and variance of one coordinate of a state measure, with SEs."""
        x = self.states()[:, axis]
        m, m_se = self.expectation(x)
        v, v_se = self.expectation((x - m) ** 2)
        return {"mean": m, "mean_se": m_se, "var": v, "var_se": v_se}


def marginal(measure: WeightedEmpiricalMeasure, theta: float) -> WeightedEmpiricalMeasure:
    """Push a segment measure forward under ``xi -> xi(theta)``."""
    if measure.is_states:
        if abs(theta) > 1e-12:
            raise paths.GridError("a state measure only has the theta = 0 marginal")
        return measure
    if theta > 1e-12 or theta < -measure.tau - 1e-12:
        raise paths.GridError(f"theta={theta} outside [-{measure.tau}, 0]")
    if isinstance(measure.atoms, SegmentAtoms):
        offset = 0 if abs(theta) <= 1e-12 else paths.steps_for(-theta, measure.atoms.dt)
        states = measure.atoms.values_at(offset)
    else:
        L = measure.atoms.shape[1]
        offset = 0 if abs(theta) <= 1e-12 else paths.steps_for(-theta, measure.dt)
        if offset >= L:
            raise paths.GridError(f"theta={theta} outside the stored window")
        states = measure.atoms[:, L - 1 - offset]
    return WeightedEmpiricalMeasure(states, measure.log_weights, measure.groups, measure.dt, 0.0,
                                    dict(measure.diagnostics))


def weighted_ks(x, w=None, y=None, v=None, cdf: Optional[Callable] = None) -> float:
    """Kolmogorov–Smirnov distance of weighted 1-d samples.

    Compares ``(x, w)`` with ``(y, v)`` or with the continuous ``cdf``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    w = np.ones_like(x) if w is None else np.asarray(w, dtype=float).reshape(-1)
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order] / np.sum(w)
    Fx = np.cumsum(ws)
    if cdf is not None:
        F = cdf(xs)
        return float(max(np.max(np.abs(Fx - F)), np.max(np.abs(Fx - ws - F))))
    y = np.asarray(y, dtype=float).reshape(-1)
    v = np.ones_like(y) if v is None else np.asarray(v, dtype=float).reshape(-1)
    oy = np.argsort(y, kind="stable")
    ys, vs = y[oy], v[oy] / np.sum(v)
    grid = np.concatenate([xs, ys])
    Fa = np.concatenate([[0.0], Fx])[np.searchsorted(xs, grid, side="right")]
    Fb = np.concatenate([[0.0], np.cumsum(vs)])[np.searchsorted(ys, grid, side="right")]
    return float(np.max(np.abs(Fa - Fb)))


def measure_ks(a: WeightedEmpiricalMeasure, b=None, axis: int = 0, cdf=None) -> float:
    xa = a.states()[:, axis]
    if cdf is not None:
        return weighted_ks(xa, a.weights(), cdf=cdf)
    return weighted_ks(xa, a.weights(), b.states()[:, axis], b.weights())


# ---------------------------------------------------------------------------
# Cesàro construction


def _systematic(w: np.ndarray, u: float) -> np.ndarray:
    n = w.size
    c = np.cumsum(w)
    c /= c[-1]
    idx = np.searchsorted(c, (u + np.arange(n)) / n, side="left")
    return np.minimum(idx, n - 1)


def cesaro_invariant(model: ModelSpec, Z: Optional[PathDrift], c: float, n_blocks: int, dt: float,
                     n_traj: int, seed: int, threads: int = 1, init=None,
                     ess_threshold: Optional[float] = 0.5, island_size: int = 64,
                     block_size: int = 4096) -> WeightedEmpiricalMeasure:
    """Riemann approximation of ``(1/cn) int_0^{cn} mu S_t^Z dt``.

    Trajectories start from segments drawn from mu (or ``init``) and follow
    the reference dynamics; the atom at every grid node ``t_k`` in
    ``(0, cn]`` carries ``log R(t_k)``.

    When ``ess_threshold`` is set, trajectories are grouped in islands of
    ``island_size``; at each block boundary (multiples of ``c``) an island
    whose weight ESS falls below ``ess_threshold * island_size`` is
    systematically resampled and its log-weights reset to the log of their
    mean, which leaves the island's unnormalised mass unchanged.
    ``ess_threshold=None`` gives the plain estimator with one group per
    trajectory.
    """
    if n_blocks < 1:
        raise EstimationError("need at least one block")
    s = paths.steps_for(c, dt)
    if s < 1:
        raise paths.GridError("block length must be positive")
    lag = paths.steps_for(model.tau, dt)
    L = lag + 1
    if init is None:
        init = sample_mu(model, n_traj, dt, rng.derive_seed(seed, "init"), threads=threads)
    init = np.asarray(init, dtype=float)
    if init.shape != (n_traj, L, model.d):
        raise EstimationError(f"initial segments must have shape {(n_traj, L, model.d)}")
    mode = "reference" if Z is None else "reference-with-weights"
    noise_seed = rng.derive_seed(seed, "noise")
    resample = ess_threshold is not None
    if resample and block_size % island_size:
        raise EstimationError("block_size must be a multiple of island_size")

    def block(lo, hi):
        st = Stepper(model, Z, init[lo:hi], dt, mode, noise_seed, range(lo, hi))
        B = hi - lo
        gid = (np.arange(lo, hi) // island_size) if resample else np.arange(lo, hi)
        recs, lws = [], []
        n_resampled, min_ess = 0, 1.0
        for j in range(n_blocks):
            arr = np.empty((B, L + s, model.d))
            arr[:, :L] = st.window()
            lw = np.empty((B, s))
            for k in range(s):
                x_new, _, _ = st.step()
                arr[:, L + k] = x_new
                lw[:, k] = st.log_w
            lw[st.flagged] = -np.inf
            recs.append(arr)
            lws.append(lw)
            if resample and j < n_blocks - 1 and Z is not None:
                idx = np.arange(B)
                new_lw = st.log_w.copy()
                for g in np.unique(gid):
                    sel = np.flatnonzero(gid == g)
                    lwg = np.where(st.flagged[sel], -np.inf, st.log_w[sel])
                    w = np.exp(lwg - np.max(lwg))
                    ess = np.sum(w) ** 2 / np.sum(w * w) / sel.size
                    min_ess = min(min_ess, float(ess))
                    if ess < ess_threshold:
                        u = rng.generator(seed, "resample", int(g), j).random()
                        idx[sel] = sel[_systematic(w, u)]
                        new_lw[sel] = scipy.special.logsumexp(lwg) - np.log(sel.size)
                        n_resampled += 1
                if n_resampled and not np.array_equal(idx, np.arange(B)):
                    st.reorder(idx)
                st.log_w = new_lw
        return recs, lws, np.repeat(gid.astype(np.int32), s), int(st.flagged.sum()), n_resampled, min_ess

    parts = run_blocks(block, n_traj, block_size, threads)
    blocks = []
    lw_all = np.empty(n_traj * s * n_blocks)
    groups = np.empty(lw_all.size, dtype=np.int32)
    pos = 0
    for j in range(n_blocks):
        for p in parts:
            recs, lws, g = p[0], p[1], p[2]
            blocks.append(recs[j])
            k = lws[j].size
            lw_all[pos : pos + k] = lws[j].reshape(-1)
            groups[pos : pos + k] = g
            lws[j] = None
            pos += k
    atoms = SegmentAtoms(blocks, L, dt)
    measure = WeightedEmpiricalMeasure(
        atoms, lw_all, groups, dt, model.tau,
        {"n_traj": n_traj, "horizon": c * n_blocks, "dt": dt, "n_atoms": len(atoms),
         "n_flagged": sum(p[3] for p in parts), "n_resampled": sum(p[4] for p in parts),
         "min_island_ess_fraction": min(p[5] for p in parts), "resampling": resample,
         "island_size": island_size if resample else 1},
    )
    measure.diagnostics["weight_ess"] = measure.ess()
    measure.diagnostics["degenerate_ess"] = bool(measure.diagnostics["weight_ess"] < MIN_ATOMS)
    return measure


# ---------------------------------------------------------------------------
# density estimates


def _trapezoid_weights(axis: np.ndarray) -> np.ndarray:
    w = np.empty_like(axis)
    dx = np.diff(axis)
    w[0], w[-1] = dx[0] / 2, dx[-1] / 2
    w[1:-1] = (dx[:-1] + dx[1:]) / 2
    return w


@dataclass
class DensityEstimate:
    """``rho0 = d nu0 / d mu0`` on a rectangular grid."""

    axes: tuple
    rho_values: np.ndarray
    bandwidth: np.ndarray
    mass_check: float
    log_mu0_values: np.ndarray
    flagged: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.axes)

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def mu0_weights(self) -> np.ndarray:
        """Quadrature weights for integrals against mu0 on the grid."""
        w = np.ones(())
        for a in self.axes:
            w = np.multiply.outer(w, _trapezoid_weights(a))
        return w * np.exp(self.log_mu0_values)

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(self.mu0_weights() * values))

    @classmethod
    def from_function(cls, model: ModelSpec, axes, rho_fn: Callable[[np.ndarray], np.ndarray]):
        """Tabulate a known ratio (analytic oracles, plotting)."""
        axes = tuple(np.asarray(a, dtype=float) for a in axes)
        shape = tuple(a.size for a in axes)
        pts = np.stack([m.reshape(-1) for m in np.meshgrid(*axes, indexing="ij")], axis=1)
        rho = np.asarray(rho_fn(pts), dtype=float).reshape(shape)
        log_mu0 = model.log_mu0(pts).reshape(shape)
        est = cls(axes, rho, np.zeros(len(axes)), 0.0, log_mu0)
        est.mass_check = est.integrate(rho)
        est.flagged = not MASS_RANGE[0] <= est.mass_check <= MASS_RANGE[1]
        return est

    def to_csv(self, path) -> None:
        path = FsPath(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pts = self.points()
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow([f"x{i + 1}" for i in range(self.dim)] + ["rho", "mu0_density"])
            for p, r, lm in zip(pts, self.rho_values.reshape(-1), self.log_mu0_values.reshape(-1)):
                wr.writerow([f"{v:.17g}" for v in p] + [f"{r:.17g}", f"{np.exp(lm):.17g}"])


def silverman_bandwidth(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-axis Silverman width with the weight ESS in place of ``n``."""
    w = w / np.sum(w)
    n_eff = 1.0 / np.sum(w * w)
    d = x.shape[1]
    mean = w @ x
    sd = np.sqrt(np.maximum(np.array([w @ (x[:, i] * x[:, i]) for i in range(d)]) - mean**2, 0.0))
    return sd * (4.0 / ((d + 2) * n_eff)) ** (1.0 / (d + 4))


_DEFAULT_NODES = {1: 257, 2: 129, 3: 65}


def _weighted_quantile_box(x: np.ndarray, w: np.ndarray, mass: float, max_points: int = 1_000_000):
    step = max(1, x.shape[0] // max_points)
    xs, ws = x[::step], w[::step]
    alpha = (1.0 - mass) / 2
    box = []
    for i in range(x.shape[1]):
        o = np.argsort(xs[:, i], kind="stable")
        c = np.cumsum(ws[o])
        c /= c[-1]
        v = xs[o, i]
        box.append((float(v[np.searchsorted(c, alpha)]), float(v[min(np.searchsorted(c, 1 - alpha), v.size - 1)])))
    return box


def _linear_bin(grid: np.ndarray, x: np.ndarray, w: np.ndarray, origin, steps, chunk=4_000_000):
    shape, d = grid.shape, x.shape[1]
    flat_grid = grid.reshape(-1)
    for lo in range(0, x.shape[0], chunk):
        xc, wc = x[lo : lo + chunk], w[lo : lo + chunk]
        base, frac, inside = [], [], np.ones(xc.shape[0], dtype=bool)
        for i in range(d):
            u = (xc[:, i] - origin[i]) / steps[i]
            b = np.floor(u).astype(np.int64)
            inside &= (b >= 0) & (b < shape[i] - 1)
            base.append(b)
            frac.append(u - b)
        base = [b[inside] for b in base]
        frac = [f[inside] for f in frac]
        wi = wc[inside]
        for corner in range(2**d):
            idx = []
            cw = wi.copy()
            for i in range(d):
                bit = (corner >> i) & 1
                idx.append(base[i] + bit)
                cw *= frac[i] if bit else 1.0 - frac[i]
            flat = np.ravel_multi_index(idx, shape)
            flat_grid += np.bincount(flat, weights=cw, minlength=flat_grid.size)


def density_ratio(marg: WeightedEmpiricalMeasure, model: ModelSpec, nodes: Optional[int] = None,
                  bandwidth=None, mass: float = 0.999, box=None) -> DensityEstimate:
    """Weighted Gaussian-kernel density of the atoms divided by mu0's density.

    The kernel density is computed by linear binning and FFT convolution on a
    grid padded by four bandwidths, then cropped to the evaluation box.  The
    default box is the union of the ``mass`` regions of mu0 and of the atoms;
    ``box="mu0"`` restricts it to the mu0 region, and an explicit list of
    per-axis ``(lo, hi)`` pairs is used as given.
    """
    x = marg.states()
    d = x.shape[1]
    if d > 3:
        raise EstimationError("gridded densities are limited to d <= 3")
    if len(marg) < MIN_ATOMS:
        raise EstimationError(f"need at least {MIN_ATOMS} atoms, got {len(marg)}")
    w = marg.weights()
    keep = w > 0
    if not keep.all():
        x, w = x[keep], w[keep]
    if x.shape[0] < MIN_ATOMS:
        raise EstimationError(f"need at least {MIN_ATOMS} atoms with positive weight")
    h = silverman_bandwidth(x, w) if bandwidth is None else np.broadcast_to(
        np.asarray(bandwidth, dtype=float), (d,)).copy()
    if np.any(~(h > 0)):
        raise EstimationError("bandwidth must be positive")
    if box is None or box == "mu0":
        box_m = mu0_box(model, mass)
        if box is None:
            box_a = _weighted_quantile_box(x, w, mass)
            box_m = [(min(a[0], b[0]), max(a[1], b[1])) for a, b in zip(box_m, box_a)]
        box = box_m
    else:
        box = [tuple(map(float, b)) for b in box]
    nodes = nodes or _DEFAULT_NODES[d]
    axes, pads, steps = [], [], []
    for (lo, hi), hi_ in zip(box, h):
        n_ax = max(nodes, int(np.ceil((hi - lo) / (hi_ / 2))) + 1)
        ax = np.linspace(lo, hi, n_ax)
        axes.append(ax)
        steps.append(ax[1] - ax[0])
        pads.append(int(np.ceil(4 * hi_ / steps[-1])))
    shape = tuple(a.size + 2 * p for a, p in zip(axes, pads))
    grid = np.zeros(shape)
    origin = [a[0] - p * st for a, p, st in zip(axes, pads, steps)]
    _linear_bin(grid, x, w, origin, steps)
    for i in range(d):
        offs = np.arange(-pads[i], pads[i] + 1) * steps[i]
        k = np.exp(-0.5 * (offs / h[i]) ** 2)
        k /= k.sum() * steps[i]
        kshape = [1] * d
        kshape[i] = k.size
        grid = scipy.signal.fftconvolve(grid, k.reshape(kshape), mode="same")
    crop = tuple(slice(p, p + a.size) for a, p in zip(axes, pads))
    nu = np.clip(grid[crop], 0.0, None)
    out_shape = tuple(a.size for a in axes)
    pts = np.stack([m.reshape(-1) for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    log_mu0 = model.log_mu0(pts).reshape(out_shape)
    rho = nu / np.exp(log_mu0)
    est = DensityEstimate(tuple(axes), rho, h, 0.0, log_mu0,
                          diagnostics={"ess": float(1.0 / np.sum(w * w)), "n_atoms": int(x.shape[0]),
                                       "box": [list(map(float, b)) for b in box]})
    est.mass_check = est.integrate(rho)
    est.flagged = not MASS_RANGE[0] <= est.mass_check <= MASS_RANGE[1]
    return est


# ---------------------------------------------------------------------------
# functionals


def _require_mass(rho: DensityEstimate) -> None:
    if rho.flagged:
        raise EstimationError(f"mass check failed: int rho dmu0 = {rho.mass_check:.4f}")


def relative_entropy(rho: DensityEstimate, model: Optional[ModelSpec] = None) -> float:
    """``mu0(rho log rho)`` for the time-0 marginal (a lower bound for the path-space entropy)."""
    _require_mass(rho)
    r = rho.rho_values
    return rho.integrate(r * np.log(np.maximum(r, DENSITY_FLOOR)))


def lp_moment(rho: DensityEstimate, p: float) -> float:
    """``mu0(rho^p)`` for the time-0 marginal."""
    if not p > 1:
        raise EstimationError("p must exceed 1")
    _require_mass(rho)
    return rho.integrate(rho.rho_values**p)


DIRICHLET_FORMS = ("sqrt", "log", "power")


def dirichlet_integrand(rho: DensityEstimate, model: ModelSpec, form: str, p: Optional[float] = None):
    """``|sigma* grad g(rho)|^2`` on the grid for ``g`` in {sqrt, log, power p/2}."""
    if form not in DIRICHLET_FORMS:
        raise EstimationError(f"form must be one of {DIRICHLET_FORMS}")
    if any(a.size < 64 for a in rho.axes):
        raise EstimationError("grid too coarse: need at least 64 nodes per axis")
    if np.any(rho.rho_values < 0):
        raise EstimationError("negative density nodes")
    r = np.maximum(rho.rho_values, DENSITY_FLOOR)
    if form == "sqrt":
        g = np.sqrt(r)
    elif form == "log":
        g = np.log(r)
    else:
        if p is None or not p > 1:
            raise EstimationError("power form needs p > 1")
        g = r ** (p / 2)
    grads = np.gradient(g, *rho.axes, edge_order=2)
    if rho.dim == 1:
        grads = [grads]
    grad = np.stack([gi.reshape(-1) for gi in grads], axis=1)
    pts = rho.points()
    sig = np.broadcast_to(model.sigma_matrix, (pts.shape[0], model.d, model.m)) \
        if model.sigma_matrix is not None else model.sigma(pts)
    v = np.einsum("nij,ni->nj", sig, grad)
    return np.sum(v * v, axis=1).reshape(rho.rho_values.shape)


def dirichlet_energy(rho: DensityEstimate, model: ModelSpec, form: str = "log",
                     p: Optional[float] = None) -> float:
    """``mu0(|sigma* grad g(rho)|^2)`` by central differences on the grid."""
    return rho.integrate(dirichlet_integrand(rho, model, form, p))


@dataclass(frozen=True)
class ExpIntegrability:
    value: float
    log_value: float
    std_error: float
    max_exponent: float
    n: int
    heavy_tail: bool


def exp_integrability(segments: np.ndarray, Z: PathDrift, lam: float) -> ExpIntegrability:
    """Monte Carlo ``mu(exp(lam |Z|^2))`` over segments drawn from mu.

    ``heavy_tail`` is set when the single largest term carries more than 10%
    of the sum, a sign that the moment may be infinite or badly estimated.
    """
    if not lam > 0:
        raise EstimationError("lambda must be positive")
    z = np.asarray(Z(np.asarray(segments, dtype=float)), dtype=float)
    a = lam * np.sum(z * z, axis=1)
    amax = float(np.max(a))
    e = np.exp(a - amax)
    log_val = amax + float(np.log(np.mean(e)))
    n = a.size
    se = float(np.exp(amax) * np.std(e, ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return ExpIntegrability(float(np.exp(log_val)), log_val, se, amax, n,
                            bool(1.0 / np.sum(e) > 0.1))


def mean_z_squared(segments: np.ndarray, Z: PathDrift):
    """``mu(|Z|^2)`` and its standard error."""
    z = np.asarray(Z(np.asarray(segments, dtype=float)), dtype=float)
    q = np.sum(z * z, axis=1)
    return float(q.mean()), float(q.std(ddof=1) / np.sqrt(q.size)) if q.size > 1 else float("inf")
