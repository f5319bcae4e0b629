"""Model zoo: reference diffusions (Z0, sigma, mu0) and path-dependent drifts.

State functions are vectorised: ``drift`` maps an ``(n, d)`` batch to
``(n, d)``, ``sigma`` maps it to ``(n, d, m)`` and ``log_mu0`` to ``(n,)``.
Path drifts act on batches of segment values of shape ``(n, L, d)``
(oldest state first) and return ``(n, m)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.integrate
import scipy.linalg
import scipy.stats

from . import paths

MODEL_NAMES = ("ou", "hamiltonian", "gruschin", "galerkin_ou")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    name: str
    d: int
    m: int
    drift: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    log_mu0: Callable[[np.ndarray], np.ndarray]
    mu0_sampler: Optional[Callable] = None
    sampler_kind: Optional[str] = None
    lsi_kappa: Optional[float] = None
    lsi_beta: Optional[float] = None
    tau: float = 0.0
    default_dt: float = 0.01
    # constant diffusion matrix, when sigma does not depend on the state
    sigma_matrix: Optional[np.ndarray] = None
    # drift = x @ linear_A.T for linear models
    linear_A: Optional[np.ndarray] = None
    mu0_cov: Optional[np.ndarray] = None
    # per-axis (grid, cdf) tables for non-Gaussian mu0
    marginal_tables: Optional[tuple] = None
    params: dict = field(default_factory=dict)

    def sigma_at(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.sigma_matrix is not None:
            return np.broadcast_to(self.sigma_matrix, (x.shape[0], self.d, self.m))
        return self.sigma(x)

    @property
    def is_linear_gaussian(self) -> bool:
        return self.linear_A is not None and self.sigma_matrix is not None and self.mu0_cov is not None


@dataclass(frozen=True)
class PathDrift:
    """The perturbation Z, a map from segments to noise-space vectors."""

    apply: Callable[[np.ndarray], np.ndarray]
    m: int
    tau: float = 0.0
    bound: Optional[float] = None
    support_radius: Optional[float] = None
    name: str = "custom"

    def __call__(self, seg):
        if isinstance(seg, paths.Segment):
            return np.asarray(self.apply(seg.values[None]))[0]
        seg = np.asarray(seg, dtype=float)
        if seg.ndim == 2:
            return np.asarray(self.apply(seg[None]))[0]
        return self.apply(seg)


# ---------------------------------------------------------------------------
# gradient-form drift


def _fd_div_a(a_fn, d, x):
    """Central differences of sum_j d_j a_ij with step 1e-5 (1 + |x_j|)."""
    out = np.zeros((x.shape[0], d))
    for j in range(d):
        h = 1e-5 * (1.0 + np.abs(x[:, j]))
        xp = x.copy()
        xm = x.copy()
        xp[:, j] += h
        xm[:, j] -= h
        out += (a_fn(xp)[:, :, j] - a_fn(xm)[:, :, j]) / (2 * h)[:, None]
    return out


def gradient_drift(grad_V, sigma, div_a=None, a=None):
    """Return ``x -> (div_a(x) - a(x) grad_V(x)) / 2`` with ``a = sigma sigma*``.

    ``sigma`` is a callable on ``(n, d)`` batches or a constant ``(d, m)``
    matrix.  ``a`` may be passed explicitly (callable or constant matrix) to
    avoid the rounding in forming ``sigma sigma*``.  Without ``div_a`` the
    divergence of ``a`` is taken by central finite differences.
    """
    if a is None:
        if callable(sigma):
            def a_fn(x):
                s = sigma(x)
                return np.einsum("nik,njk->nij", s, s)
        else:
            s = np.atleast_2d(np.asarray(sigma, dtype=float))
            a_const = s @ s.T
            a_fn = None
    elif callable(a):
        a_fn = a
    else:
        a_const = np.atleast_2d(np.asarray(a, dtype=float))
        a_fn = None

    def drift(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        g = np.asarray(grad_V(x), dtype=float)
        if g.shape != (n, d):
            raise ModelError(f"grad_V returned shape {g.shape}, expected {(n, d)}")
        if a_fn is None:
            if a_const.shape != (d, d):
                raise ModelError(f"diffusion matrix has shape {a_const.shape}, state dim is {d}")
            ag = np.einsum("ij,nj->ni", a_const, g)
        else:
            am = a_fn(x)
            if am.shape != (n, d, d):
                raise ModelError(f"sigma sigma* has shape {am.shape[1:]}, state dim is {d}")
            ag = np.einsum("nij,nj->ni", am, g)
        if div_a is not None:
            dv = np.asarray(div_a(x), dtype=float)
        elif a_fn is None:
            dv = np.zeros((n, d))
        else:
            dv = _fd_div_a(a_fn, d, x)
        if dv.shape != (n, d):
            raise ModelError(f"div_a returned shape {dv.shape}, expected {(n, d)}")
        return 0.5 * (dv - ag)

    return drift


# ---------------------------------------------------------------------------
# the zoo


def _gaussian_log_density(cov):
    cov = np.atleast_2d(cov)
    d = cov.shape[0]
    chol = np.linalg.cholesky(cov)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    const = -0.5 * (d * np.log(2 * np.pi) + logdet)

    def log_mu0(x):
        x = np.atleast_2d(x)
        y = scipy.linalg.solve_triangular(chol, x.T, lower=True)
        return const - 0.5 * np.sum(y * y, axis=0)

    return log_mu0


def _gaussian_sampler(cov):
    chol = np.linalg.cholesky(np.atleast_2d(cov))
    d = chol.shape[0]

    def sample(n, rng):
        z = rng.standard_normal((n, d))
        return z @ chol.T, {"kind": "exact"}

    return sample


def _lyapunov_cov(A, sig):
    return scipy.linalg.solve_continuous_lyapunov(A, -(sig @ sig.T))


def _build_ou(d=1, tau=0.0):
    d = int(d)
    if d < 1:
        raise ModelError("ou needs d >= 1")
    sig = np.sqrt(2.0) * np.eye(d)
    drift = gradient_drift(lambda x: x, sig, div_a=lambda x: np.zeros_like(x), a=2.0 * np.eye(d))
    cov = np.eye(d)
    return ModelSpec(
        name="ou", d=d, m=d, drift=drift, sigma=lambda x: np.broadcast_to(sig, (len(x), d, d)),
        log_mu0=_gaussian_log_density(cov), mu0_sampler=_gaussian_sampler(cov),
        sampler_kind="exact", lsi_kappa=1.0, lsi_beta=0.0, tau=float(tau),
        sigma_matrix=sig, linear_A=-np.eye(d), mu0_cov=cov,
        params={"d": d, "tau": float(tau)},
    )


def _build_hamiltonian(d=1, tau=0.0):
    d = int(d)
    if d < 1:
        raise ModelError("hamiltonian needs d >= 1")
    eye, zero = np.eye(d), np.zeros((d, d))
    A = np.block([[zero, eye], [-eye, -eye]])
    sig = np.vstack([zero, eye])
    cov = _lyapunov_cov(A, sig)
    cov = 0.5 * (cov + cov.T)
    return ModelSpec(
        name="hamiltonian", d=2 * d, m=d, drift=lambda x: np.atleast_2d(x) @ A.T,
        sigma=lambda x: np.broadcast_to(sig, (len(x), 2 * d, d)),
        log_mu0=_gaussian_log_density(cov), mu0_sampler=_gaussian_sampler(cov),
        sampler_kind="exact", tau=float(tau), sigma_matrix=sig, linear_A=A, mu0_cov=cov,
        params={"d": d, "tau": float(tau)},
    )


def _galerkin_sequences(n, lambdas, qs, lambda_scale, lambda_power, q_scale, q_power, delta):
    idx = np.arange(1, n + 1, dtype=float)
    if lambdas is None:
        lam = lambda_scale * idx ** lambda_power
    else:
        lam = np.asarray(lambdas, dtype=float)
        if lam.size < n:
            raise ModelError(f"need {n} eigenvalues, got {lam.size}")
        lam = lam[:n]
    if qs is None:
        q = q_scale * idx ** q_power
    else:
        q = np.asarray(qs, dtype=float)
        if q.size < n:
            raise ModelError(f"need {n} noise coefficients, got {q.size}")
        q = q[:n]
    if np.any(lam <= 0):
        raise ModelError("eigenvalues must be positive")
    if np.any(q == 0) or not np.all(np.isfinite(q)):
        raise ModelError("noise coefficients must be nonzero and finite")
    if not 0 < delta < 1:
        raise ModelError("delta must lie in (0, 1)")
    partial = np.sum(q**2 / lam**delta)
    if not np.isfinite(partial):
        raise ModelError("sum q_i^2 / lambda_i^delta is not finite")
    if lambdas is None and qs is None and not lambda_power * delta - 2 * q_power > 1:
        raise ModelError("power-law spectrum makes sum q_i^2 / lambda_i^delta diverge")
    return lam, q


def _build_galerkin_ou(n=1, lambdas=None, qs=None, lambda_scale=1.0, lambda_power=2.0,
                      q_scale=1.0, q_power=0.0, delta=0.75, tau=0.0):
    n = int(n)
    if n < 1:
        raise ModelError("galerkin_ou needs at least one mode")
    lam, q = _galerkin_sequences(n, lambdas, qs, lambda_scale, lambda_power, q_scale, q_power, delta)
    A = -np.diag(lam)
    sig = np.diag(q)
    cov = np.diag(q**2 / (2 * lam))
    return ModelSpec(
        name="galerkin_ou", d=n, m=n, drift=lambda x: np.atleast_2d(x) * (-lam),
        sigma=lambda x: np.broadcast_to(sig, (len(x), n, n)),
        log_mu0=_gaussian_log_density(cov), mu0_sampler=_gaussian_sampler(cov),
        sampler_kind="exact", lsi_kappa=1.0 / lam.min(), lsi_beta=0.0, tau=float(tau),
        default_dt=min(0.01, 0.1 / lam.max()), sigma_matrix=sig, linear_A=A, mu0_cov=cov,
        params={"n": n, "lambdas": lam.tolist(), "qs": q.tolist(), "delta": delta, "tau": float(tau)},
    )


class GruschinPotential:
    """``V(x) = c1 + (c3 |x1 - c1|^(l+1) + c4 x2^2)^power`` and its gradient."""

    def __init__(self, l, power, c1, c3, c4):
        self.l, self.power, self.c1, self.c3, self.c4 = l, power, c1, c3, c4

    def inner(self, x1, x2):
        return self.c3 * np.abs(x1 - self.c1) ** (self.l + 1) + self.c4 * x2**2

    def __call__(self, x):
        x = np.atleast_2d(x)
        return self.c1 + self.inner(x[:, 0], x[:, 1]) ** self.power

    def grad(self, x):
        x = np.atleast_2d(x)
        u = self.inner(x[:, 0], x[:, 1])
        outer = self.power * u ** (self.power - 1)
        r = x[:, 0] - self.c1
        g1 = outer * self.c3 * (self.l + 1) * np.abs(r) ** self.l * np.sign(r)
        g2 = outer * 2 * self.c4 * x[:, 1]
        return np.stack([g1, g2], axis=1)

    def radii(self, level=60.0):
        """Half-widths of a box outside which ``V - c1 > level``."""
        s = level ** (1.0 / self.power)
        return (s / self.c3) ** (1.0 / (self.l + 1)), np.sqrt(s / self.c4)


def metropolis_sampler(log_density, d, scales, start, n_chains=1000, burn_in=10_000,
                       thin=10, target=0.3):
    """Random-walk Metropolis over parallel chains with step-size tuning.

    The common step size is tuned towards acceptance rate ``target`` during
    the first half of the burn-in and frozen afterwards.
    """
    scales = np.asarray(scales, dtype=float)
    start = np.asarray(start, dtype=float)

    def sample(n, rng):
        k = min(n_chains, n)
        x = start + 0.1 * scales * rng.standard_normal((k, d))
        lp = log_density(x)
        log_step = np.log(2.4 / np.sqrt(d))
        adapt_until = burn_in // 2
        acc_window = 0
        n_per_chain = -(-n // k)
        total = burn_in + thin * n_per_chain
        out = np.empty((n_per_chain, k, d))
        accepted = 0
        for it in range(total):
            prop = x + np.exp(log_step) * scales * rng.standard_normal((k, d))
            lp_prop = log_density(prop)
            acc = np.log(rng.random(k)) < lp_prop - lp
            x = np.where(acc[:, None], prop, x)
            lp = np.where(acc, lp_prop, lp)
            a = acc.mean()
            if it < adapt_until:
                acc_window += a
                if (it + 1) % 50 == 0:
                    log_step += 0.5 * (acc_window / 50 - target)
                    acc_window = 0
            elif it >= burn_in:
                accepted += a
                j = it - burn_in
                if (j + 1) % thin == 0:
                    out[j // thin] = x
        samples = out.transpose(1, 0, 2).reshape(-1, d)[:n]
        info = {"kind": "metropolis", "acceptance_rate": accepted / (total - burn_in),
                "step_size": float(np.exp(log_step)), "n_chains": k,
                "burn_in": burn_in, "thin": thin}
        return samples, info

    return sample


def _build_gruschin(l=1, power=2, c1=0.0, c2=1.0, c3=1.0, c4=1.0, tau=0.0):
    if int(l) != l or l < 1:
        raise ModelError("l must be a positive integer")
    if int(power) != power or power < 2:
        raise ModelError("power must be an integer >= 2")
    if c2 == 0:
        raise ModelError("c2 must be nonzero")
    if not (c3 > 0 and c4 > 0):
        raise ModelError("c3 and c4 must be positive")
    l, power = int(l), int(power)
    V = GruschinPotential(l, power, c1, c3, c4)
    r1, r2 = V.radii()
    # normaliser of exp(-(V - c1)); the additive c1 cancels
    z, _ = scipy.integrate.dblquad(
        lambda x2, x1: np.exp(-(V.inner(x1, x2) ** power)),
        c1 - r1, c1 + r1, -r2, r2, epsabs=1e-13, epsrel=1e-11,
    )
    log_z = np.log(z)

    def log_mu0(x):
        x = np.atleast_2d(x)
        return -(V.inner(x[:, 0], x[:, 1]) ** power) - log_z

    def sigma(x):
        x = np.atleast_2d(x)
        s = np.zeros((x.shape[0], 2, 2))
        s[:, 0, 0] = 1.0
        s[:, 1, 1] = x[:, 0] ** l
        return s

    def diffusion(x):
        x = np.atleast_2d(x)
        a = np.zeros((x.shape[0], 2, 2))
        a[:, 0, 0] = 1.0
        a[:, 1, 1] = x[:, 0] ** (2 * l)
        return a

    # (sigma sigma*)_22 depends on x1 only, so the divergence term vanishes
    drift = gradient_drift(V.grad, sigma, div_a=lambda x: np.zeros_like(np.atleast_2d(x)), a=diffusion)

    # marginal tables by tensor Simpson quadrature on a fine grid
    g1 = np.linspace(c1 - r1, c1 + r1, 2001)
    g2 = np.linspace(-r2, r2, 2001)
    dens = np.exp(-(V.inner(g1[:, None], g2[None, :]) ** power) - log_z)
    p1 = scipy.integrate.simpson(dens, x=g2, axis=1)
    p2 = scipy.integrate.simpson(dens, x=g1, axis=0)
    cdf1 = scipy.integrate.cumulative_trapezoid(p1, g1, initial=0.0)
    cdf2 = scipy.integrate.cumulative_trapezoid(p2, g2, initial=0.0)
    tables = ((g1, cdf1 / cdf1[-1], p1), (g2, cdf2 / cdf2[-1], p2))
    sd = [np.sqrt(np.trapezoid((g - np.trapezoid(g * p, g)) ** 2 * p, g)) for g, _, p in tables]
    sampler = metropolis_sampler(lambda x: log_mu0(x), 2, sd, [c1, 0.0])
    return ModelSpec(
        name="gruschin", d=2, m=2, drift=drift, sigma=sigma, log_mu0=log_mu0,
        mu0_sampler=sampler, sampler_kind="metropolis", lsi_kappa=None, lsi_beta=0.0,
        tau=float(tau), default_dt=0.005, marginal_tables=tables,
        params={"l": l, "power": power, "c1": c1, "c2": c2, "c3": c3, "c4": c4,
                "tau": float(tau), "log_normaliser": float(log_z)},
    )


_BUILDERS = {
    "ou": _build_ou,
    "hamiltonian": _build_hamiltonian,
    "gruschin": _build_gruschin,
    "galerkin_ou": _build_galerkin_ou,
}


def build_model(name: str, params: Optional[dict] = None) -> ModelSpec:
    """Construct a zoo model by name; see the builders for parameters."""
    if name not in _BUILDERS:
        raise ModelError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
    params = dict(params or {})
    try:
        model = _BUILDERS[name](**params)
    except TypeError as exc:
        raise ModelError(f"invalid parameters for {name}: {exc}") from None
    if model.tau < 0:
        raise ModelError("tau must be nonnegative")
    return model


def mu0_marginal_cdf(model: ModelSpec, axis: int):
    """CDF of the ``axis`` marginal of mu0."""
    if model.mu0_cov is not None:
        sd = float(np.sqrt(model.mu0_cov[axis, axis]))
        return lambda x: scipy.stats.norm.cdf(x, scale=sd)
    if model.marginal_tables is not None:
        g, cdf, _ = model.marginal_tables[axis]
        return lambda x: np.interp(x, g, cdf)
    raise ModelError(f"no marginal information for {model.name}")


def mu0_box(model: ModelSpec, mass: float = 0.999):
    """Per-axis intervals of a box holding at least ``mass`` of mu0."""
    alpha = (1.0 - mass) / (2 * model.d)
    box = []
    for i in range(model.d):
        if model.mu0_cov is not None:
            sd = float(np.sqrt(model.mu0_cov[i, i]))
            z = scipy.stats.norm.ppf(1 - alpha)
            box.append((-z * sd, z * sd))
        elif model.marginal_tables is not None:
            g, cdf, _ = model.marginal_tables[i]
            box.append((float(np.interp(alpha, cdf, g)), float(np.interp(1 - alpha, cdf, g))))
        else:
            raise ModelError(f"no marginal information for {model.name}")
    return box


# ---------------------------------------------------------------------------
# path drifts


def _theta_index(L, tau, theta):
    if abs(theta) <= 1e-12:
        return L - 1
    if L == 1:
        raise paths.GridError("a state drift can only read theta = 0")
    dt = tau / (L - 1)
    return L - 1 - paths.steps_for(-theta, dt)


def zero_drift(m: int) -> PathDrift:
    return PathDrift(lambda v: np.zeros((v.shape[0], m)), m, bound=0.0, name="zero")


def constant_drift(c) -> PathDrift:
    c = np.atleast_1d(np.asarray(c, dtype=float))
    return PathDrift(lambda v: np.broadcast_to(c, (v.shape[0], c.size)).copy(), c.size,
                     bound=float(np.linalg.norm(c)), name="constant")


def linear_drift(B, theta: float = 0.0, tau: float = 0.0) -> PathDrift:
    """``Z(xi) = B xi(theta)`` for a grid-aligned ``theta`` in ``[-tau, 0]``."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if not -tau - 1e-12 <= theta <= 1e-12:
        raise paths.GridError(f"theta={theta} outside [-{tau}, 0]")

    def apply(v):
        x = v[:, _theta_index(v.shape[1], tau, theta), :]
        return x @ B.T

    return PathDrift(apply, B.shape[0], tau=float(tau), name="linear")


def integral_drift(h, tau: float, m: int = 1) -> PathDrift:
    """``Z(xi) = int_{-tau}^0 h(xi(theta)) dtheta`` by the trapezoid rule.

    ``h`` maps ``(k, d)`` states to ``(k, m)``.
    """
    if not tau > 0:
        raise ModelError("integral drift needs tau > 0")

    def apply(v):
        n, L, d = v.shape
        if L < 2:
            raise paths.GridError("integral drift needs at least two window nodes")
        hv = np.asarray(h(v.reshape(n * L, d)), dtype=float).reshape(n, L, -1)
        return np.trapezoid(hv, dx=tau / (L - 1), axis=1)

    return PathDrift(apply, m, tau=float(tau), name="integral")


def truncate_drift(Z: PathDrift, n: float) -> PathDrift:
    """``Z 1{|Z| <= n}``: switch the drift off where it exceeds ``n``."""
    if not n > 0:
        raise ModelError("truncation level must be positive")

    def apply(v):
        z = np.asarray(Z.apply(v), dtype=float)
        keep = np.linalg.norm(z, axis=1) <= n
        return np.where(keep[:, None], z, 0.0)

    return PathDrift(apply, Z.m, tau=Z.tau, bound=float(n), support_radius=Z.support_radius,
                     name=f"truncated({Z.name})")
