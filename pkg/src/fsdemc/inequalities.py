"""Bound constants and numerical checks of the functional inequalities.

Closed-form pieces: the threshold ``lambda_{kappa,tau}``, the exponent
``q_lambda``, the entropy bound, the Sobolev-type density bounds and
Nelson's exponent.  Checks: log-Sobolev by quadrature, hyperboundedness of
the reference semigroup, and the power Harnack inequality by Monte Carlo.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from . import rng
from .integrate import SimConfig, simulate
from .models import ModelSpec, mu0_box
from .quadrature import _trapezoid_rule, gaussian_rule, mu0_quadrature


class PreconditionError(ValueError):
    pass


def _num(x):
    x = float(x)
    if math.isfinite(x):
        return x
    return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")


@dataclass
class BoundReport:
    name: str
    lhs: float
    rhs: float
    precondition_ok: bool
    inputs: dict = field(default_factory=dict)
    passed: Optional[bool] = None
    std_error: Optional[float] = None
    tag: Optional[str] = None

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    def to_dict(self) -> dict:
        return {
            "name": self.name, "lhs": _num(self.lhs), "rhs": _num(self.rhs),
            "slack": _num(self.slack), "precondition_ok": bool(self.precondition_ok),
            "passed": self.passed, "std_error": None if self.std_error is None else _num(self.std_error),
            "tag": self.tag, "inputs": {k: _jsonable(v) for k, v in self.inputs.items()},
        }


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        return _num(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def reports_to_json(reports: Sequence[BoundReport], path) -> None:
    FsPath(path).parent.mkdir(parents=True, exist_ok=True)
    FsPath(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2))


def reports_to_csv(reports: Sequence[BoundReport], path) -> None:
    FsPath(path).parent.mkdir(parents=True, exist_ok=True)
    with FsPath(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["name", "lhs", "rhs", "slack", "precondition_ok", "passed", "std_error", "tag", "inputs"])
        for r in reports:
            d = r.to_dict()
            wr.writerow([d["name"], d["lhs"], d["rhs"], d["slack"], d["precondition_ok"], d["passed"],
                         d["std_error"], d["tag"], json.dumps(d["inputs"], sort_keys=True)])


# ---------------------------------------------------------------------------
# closed-form constants


def threshold_condition(lam, kappa: float, tau: float):
    """``(1 + sqrt(1 + 8 lam / tau)) (1 - sqrt(kappa / lam))``."""
    lam = np.asarray(lam, dtype=float)
    return (1.0 + np.sqrt(1.0 + 8.0 * lam / tau)) * (1.0 - np.sqrt(kappa / lam))


def lambda_kappa_tau(kappa: float, tau: float, tol: float = 1e-10) -> float:
    """Smallest ``lam > kappa`` with ``threshold_condition(lam) >= 16``.

    Bisection on the increasing condition; the returned point satisfies the
    condition with residual in ``[0, tol]``.  Equals ``kappa`` when ``tau = 0``.
    """
    if not kappa > 0:
        raise PreconditionError("kappa must be positive")
    if tau < 0:
        raise PreconditionError("tau must be nonnegative")
    if tau == 0:
        return float(kappa)
    g = lambda lam: float(threshold_condition(lam, kappa, tau)) - 16.0
    lo, hi = float(kappa), 2.0 * kappa
    while g(hi) < 0:
        lo, hi = hi, 2.0 * hi
    while True:
        gh = g(hi)
        if gh <= tol:
            return hi
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            return hi
        if g(mid) >= 0:
            hi = mid
        else:
            lo = mid


def q_lambda(lam: float, kappa: float, tau: float, tol: float = 1e-10) -> float:
    """The exponent ``q_lambda`` for ``lam >= lambda_{kappa,tau}``.

    The discriminant is evaluated in the factored form
    ``(sqrt(lam) - sqrt(kappa)) sqrt(lam) g / D`` with ``g`` the threshold
    residual; residuals in ``[-tol, 0)`` (the accuracy of
    :func:`lambda_kappa_tau`) count as the boundary case.  ``tau = 0`` uses
    the limit ``D -> infinity``.
    """
    if not (kappa > 0 and lam > kappa):
        raise PreconditionError("need lam > kappa > 0")
    if tau < 0:
        raise PreconditionError("tau must be nonnegative")
    sl, sk = math.sqrt(lam), math.sqrt(kappa)
    gap = sl - sk
    if tau == 0:
        return 2.0 * sl / (2.0 * gap)
    D = 1.0 + math.sqrt(1.0 + 8.0 * lam / tau)
    g = (1.0 - math.sqrt(kappa / lam)) * D - 16.0
    if g < -tol:
        raise PreconditionError(f"lam={lam} is below lambda_kappa_tau (residual {g:.3g})")
    disc = gap * sl * max(g, 0.0) / D if g > tol else 0.0
    return 2.0 * sl / (gap + math.sqrt(disc))


def ent_bound(t0: float, tau: float, p0: float, lam: float, log_mgf: float, log_c0: float) -> float:
    """Right side of the entropy bound for the invariant density."""
    a = (3.0 * p0 - 1.0) * (t0 + tau)
    denom = 2.0 * lam * (p0 - 1.0) - a
    if not p0 > 1:
        raise PreconditionError("p0 must exceed 1")
    if not denom > 0:
        raise PreconditionError(f"2 lam (p0 - 1) - (3 p0 - 1)(t0 + tau) = {denom:.4g} <= 0")
    return (a * log_mgf + 4.0 * lam * p0 * log_c0) / denom


def ent_bound_report(measured: float, t0: float, tau: float, p0: float, lam: float, log_mgf: float,
                     log_c0: float, measured_se: float = 0.0) -> BoundReport:
    inputs = {"t0": t0, "tau": tau, "p0": p0, "lambda": lam, "log_mgf": log_mgf, "log_c0": log_c0}
    try:
        rhs = ent_bound(t0, tau, p0, lam, log_mgf, log_c0)
        ok = True
    except PreconditionError:
        rhs, ok = float("inf"), False
    passed = bool(measured <= rhs + 3 * measured_se) if ok else None
    return BoundReport("entropy", measured, rhs, ok, inputs, passed, measured_se,
                       "marginal entropy (lower bound for the path-space entropy)")


def si_bounds(lam: float, kappa: float, beta: float, log_mgf: float, mean_Z2: float):
    """``(bound_sqrt, bound_log) = ((log_mgf + beta) / (lam - kappa), 4 mean_Z2)``."""
    if not lam > kappa:
        raise PreconditionError("need lam > kappa")
    if beta < 0:
        raise PreconditionError("beta must be nonnegative")
    return (log_mgf + beta) / (lam - kappa), 4.0 * mean_Z2


def nelson_p0(t0: float) -> float:
    if not t0 > 0:
        raise PreconditionError("t0 must be positive")
    return 0.5 * (1.0 + math.exp(2.0 * t0))


# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True)
class TestFunction:
    """A function on ``(n, d)`` batches with its gradient ``(n, d)``."""

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]

    __test__ = False  # keep pytest from collecting this


def exponential_function(a: float, axis: int = 0) -> TestFunction:
    """``exp(a x_axis / 2)``."""
    def f(x):
        return np.exp(0.5 * a * x[:, axis])

    def grad(x):
        g = np.zeros_like(x)
        g[:, axis] = 0.5 * a * f(x)
        return g

    return TestFunction(f"exp({a}*x{axis + 1}/2)", f, grad)


def exponential_family(a_values=(0.5, 1.0, 2.0), d: int = 1) -> list:
    return [exponential_function(a, i) for i in range(d) for a in a_values]


def quadratic_function(b: float, axis: int = 0) -> TestFunction:
    """``1 + b x_axis^2``."""
    def f(x):
        return 1.0 + b * x[:, axis] ** 2

    def grad(x):
        g = np.zeros_like(x)
        g[:, axis] = 2 * b * x[:, axis]
        return g

    return TestFunction(f"1+{b}*x{axis + 1}^2", f, grad)


def hermite_function(k: int, eps: float = 0.5, axis: int = 0) -> TestFunction:
    """``1 + eps He_k(x_axis)`` with the probabilists' Hermite polynomial."""
    c = np.zeros(k + 1)
    c[k] = 1.0
    dc = np.polynomial.hermite_e.hermeder(c)

    def f(x):
        return 1.0 + eps * np.polynomial.hermite_e.hermeval(x[:, axis], c)

    def grad(x):
        g = np.zeros_like(x)
        g[:, axis] = eps * np.polynomial.hermite_e.hermeval(x[:, axis], dc)
        return g

    return TestFunction(f"1+{eps}*He{k}(x{axis + 1})", f, grad)


def constant_function(c: float = 1.0) -> TestFunction:
    return TestFunction(f"const({c})", lambda x: np.full(x.shape[0], c), lambda x: np.zeros_like(x))


def default_family(model: ModelSpec) -> list:
    d = model.d
    fam = exponential_family((0.5, 1.0, 2.0), d)
    fam += [quadratic_function(0.5, i) for i in range(d)]
    return fam


# ---------------------------------------------------------------------------
# log-Sobolev


@dataclass
class LSIResult:
    reports: list
    kappa_hat: float
    beta: float
    quadrature: str

    def to_dict(self) -> dict:
        return {"kappa_hat": _num(self.kappa_hat), "beta": self.beta, "quadrature": self.quadrature,
                "reports": [r.to_dict() for r in self.reports]}


def _sigma_at(model: ModelSpec, x: np.ndarray) -> np.ndarray:
    if model.sigma_matrix is not None:
        return np.broadcast_to(model.sigma_matrix, (x.shape[0], model.d, model.m))
    return model.sigma(x)


def lsi_test(model: ModelSpec, family: Optional[Sequence[TestFunction]] = None,
             kappa: Optional[float] = None, beta: float = 0.0, quad=None, tol: float = 1e-6) -> LSIResult:
    """Check ``mu0(f^2 log f^2) <= kappa mu0(|sigma* grad f|^2) + beta`` for
    ``mu0(f^2) = 1`` over a test family, by quadrature.

    ``kappa`` defaults to the model's known constant; the empirical
    ``kappa_hat`` is the largest ratio of the two sides (with ``beta = 0``)
    over family members with nonzero energy.
    """
    family = list(family) if family is not None else default_family(model)
    quad = quad or mu0_quadrature(model)
    kappa = model.lsi_kappa if kappa is None else kappa

    def integrands(x):
        cols = []
        sig = _sigma_at(model, x)
        for tf in family:
            fx = tf.f(x)
            f2 = fx * fx
            v = np.einsum("nij,ni->nj", sig, tf.grad(x))
            with np.errstate(divide="ignore", invalid="ignore"):
                ent = np.where(f2 > 0, f2 * np.log(np.where(f2 > 0, f2, 1.0)), 0.0)
            cols += [f2, ent, np.sum(v * v, axis=1)]
        return np.stack(cols, axis=1)

    vals = quad.integrate(integrands).reshape(len(family), 3)
    reports, ratios = [], []
    for tf, (norm, ent, energy) in zip(family, vals):
        lhs = ent / norm - math.log(norm)
        dirichlet = energy / norm
        if dirichlet > 1e-14:
            ratios.append(lhs / dirichlet)
        if kappa is not None:
            rhs = kappa * dirichlet + beta
            passed = bool(lhs <= rhs + tol)
        else:
            rhs, passed = float("nan"), None
        reports.append(BoundReport("lsi", lhs, rhs, kappa is not None,
                                   {"f": tf.name, "kappa": kappa, "beta": beta, "dirichlet": dirichlet},
                                   passed, None, quad.tag))
    kappa_hat = max(ratios) if ratios else float("nan")
    return LSIResult(reports, kappa_hat, beta, quad.tag)


# ---------------------------------------------------------------------------
# semigroup of the reference dynamics


def linear_gaussian_transition(model: ModelSpec, t: float):
    """``(M, S)`` with ``X_t | X_0 = x ~ N(M x, S)`` for linear-Gaussian models."""
    if not model.is_linear_gaussian:
        raise PreconditionError(f"{model.name} has no closed-form transition")
    M = scipy.linalg.expm(model.linear_A * t)
    S = model.mu0_cov - M @ model.mu0_cov @ M.T
    return M, 0.5 * (S + S.T)


def _semigroup_exact(model, t, fns, x, order):
    M, S = linear_gaussian_transition(model, t)
    xi, wi = gaussian_rule(np.zeros(model.d), S, order)
    means = x @ M.T
    out = np.zeros((len(fns), x.shape[0]))
    for lo in range(0, x.shape[0], 512):
        pts = means[lo : lo + 512, None, :] + xi[None, :, :]
        flat = pts.reshape(-1, model.d)
        for j, f in enumerate(fns):
            out[j, lo : lo + 512] = f(flat).reshape(pts.shape[:2]) @ wi
    return out


def _semigroup_mc(model, t, fns, x, n_mc, seed, dt):
    dt = dt or model.default_dt
    reps = np.repeat(x, n_mc, axis=0)
    cfg = SimConfig(dt=dt, horizon=t, n_traj=reps.shape[0], seed=seed, mode="reference",
                    record_stride=None, store_noise=False)
    end = simulate(model, None, reps, cfg).final_window[:, -1]
    return np.stack([f(end).reshape(x.shape[0], n_mc).mean(axis=1) for f in fns])


@dataclass
class HyperResult:
    value: float
    ratios: dict
    exponent: float
    t0: float
    method: str

    def to_dict(self) -> dict:
        return {"value": _num(self.value), "exponent": self.exponent, "t0": self.t0,
                "method": self.method, "ratios": {k: _num(v) for k, v in self.ratios.items()}}


def hyper_norm(model: ModelSpec, t0: float, p0: float, family: Optional[Sequence[TestFunction]] = None,
               n_mc: int = 256, exponent: Optional[float] = None, seed: int = 0,
               order: int = 64, dt: Optional[float] = None) -> HyperResult:
    """Lower bound ``max_f ||P_t0 f||_q / ||f||_2`` with ``q = 2 p0``
    (or ``exponent``), norms in ``L^q(mu0)``.

    Linear-Gaussian models use the exact Gaussian transition (Mehler form
    for ou); other models estimate ``P_t0 f`` by simulation from quadrature
    nodes.
    """
    if t0 < 0 or p0 < 1:
        raise PreconditionError("need t0 >= 0 and p0 >= 1")
    q = 2.0 * p0 if exponent is None else float(exponent)
    family = list(family) if family is not None else hyper_family(model)
    fns = [tf.f for tf in family]
    if model.mu0_cov is not None:
        nodes, w = gaussian_rule(np.zeros(model.d), model.mu0_cov, order if model.d == 1 else 24)
        method = "gauss-hermite"
    else:
        nodes, w = _trapezoid_rule(mu0_box(model, 0.9999), 33)
        w = w * np.exp(model.log_mu0(nodes))
        w /= w.sum()
        method = "trapezoid"
    if t0 == 0:
        pf = np.stack([f(nodes) for f in fns])
    elif model.is_linear_gaussian:
        pf = _semigroup_exact(model, t0, fns, nodes, order if model.d == 1 else 24)
        method += "+exact transition"
    else:
        pf = _semigroup_mc(model, t0, fns, nodes, n_mc, rng.derive_seed(seed, "hyper"), dt)
        method += f"+monte carlo ({n_mc} paths per node)"
    ratios = {}
    for tf, f, pfj in zip(family, fns, pf):
        fx = np.abs(f(nodes))
        n2 = (w @ fx**2) ** 0.5
        nq = (w @ np.abs(pfj) ** q) ** (1.0 / q)
        ratios[tf.name] = float(nq / n2)
    return HyperResult(max(ratios.values()), ratios, q, t0, method)


def hyper_family(model: ModelSpec) -> list:
    """Exponentials ``exp(a x_i)`` and perturbed Hermite polynomials."""
    fam = []
    for i in range(model.d):
        fam += [exponential_function(2 * a, i) for a in (0.25, 0.5, 1.0, 2.0)]
        fam += [hermite_function(k, 0.5, i) for k in (1, 2, 3)]
    return fam


# ---------------------------------------------------------------------------
# Harnack


def harnack_phi(model: ModelSpec, C: float, p: float, t: float, x, y) -> float:
    """``Phi_p(t, x, y)`` in the form used for each model."""
    r2 = float(np.sum((np.asarray(x, float) - np.asarray(y, float)) ** 2))
    if model.name in ("ou", "galerkin_ou"):
        return C * p * r2 / ((p - 1) * t)
    if model.name == "hamiltonian":
        return C * r2 / min(1.0, t**3)
    raise PreconditionError(f"no Harnack form recorded for {model.name}")


@dataclass
class HarnackResult:
    reports: list
    C: Optional[float]
    passed: bool
    scanned: bool

    def to_dict(self) -> dict:
        return {"C": self.C, "passed": self.passed, "scanned": self.scanned,
                "reports": [r.to_dict() for r in self.reports]}


def _transition_samples(model, t, x, n, seed, dt):
    x = np.asarray(x, dtype=float).reshape(1, model.d)
    if model.is_linear_gaussian:
        M, S = linear_gaussian_transition(model, t)
        evals, evecs = np.linalg.eigh(S)
        root = evecs * np.sqrt(np.clip(evals, 0, None))
        z = rng.generator(seed).standard_normal((n, model.d))
        return x @ M.T + z @ root.T
    cfg = SimConfig(dt=dt or model.default_dt, horizon=t, n_traj=n, seed=seed, record_stride=None,
                    store_noise=False)
    return simulate(model, None, np.repeat(x, n, axis=0), cfg).final_window[:, -1]


def harnack_check(model: ModelSpec, p: float, t: float, pairs, family: Optional[Sequence[TestFunction]] = None,
                  C: Optional[float] = None, n_mc: int = 100_000, seed: int = 0, C_grid=None,
                  dt: Optional[float] = None) -> HarnackResult:
    """Check ``(P_t f(x))^p <= exp(Phi_p(t, x, y)) P_t f^p (y)`` by Monte Carlo.

    A pair passes when the left side exceeds the right by at most three
    combined standard errors.  Without ``C`` the smallest value on a
    log-grid making every check pass is reported.
    """
    if not p > 1:
        raise PreconditionError("p must exceed 1")
    family = list(family) if family is not None else [quadratic_function(1.0, i) for i in range(model.d)]
    stats = []
    for k, (x, y) in enumerate(pairs):
        xs = _transition_samples(model, t, x, n_mc, rng.derive_seed(seed, "harnack-x", k), dt)
        ys = xs if np.array_equal(np.asarray(x, float), np.asarray(y, float)) else \
            _transition_samples(model, t, y, n_mc, rng.derive_seed(seed, "harnack-y", k), dt)
        for tf in family:
            fx, fy = tf.f(xs), np.abs(tf.f(ys)) ** p
            m, se_m = float(fx.mean()), float(fx.std(ddof=1) / np.sqrt(n_mc))
            lhs, se_l = abs(m) ** p, p * abs(m) ** (p - 1) * se_m
            r, se_r = float(fy.mean()), float(fy.std(ddof=1) / np.sqrt(n_mc))
            stats.append((x, y, tf.name, lhs, se_l, r, se_r))

    def build(Cv):
        reps = []
        for x, y, name, lhs, se_l, r, se_r in stats:
            e = math.exp(harnack_phi(model, Cv, p, t, x, y))
            rhs, se = e * r, math.hypot(se_l, e * se_r)
            reps.append(BoundReport("harnack", lhs, rhs, True,
                                    {"x": list(np.ravel(x)), "y": list(np.ravel(y)), "f": name, "p": p,
                                     "t": t, "C": Cv}, bool(lhs <= rhs + 3 * se), se, "monte carlo"))
        return reps

    if C is not None:
        reps = build(C)
        return HarnackResult(reps, C, all(r.passed for r in reps), False)
    grid = np.concatenate([[0.0], np.logspace(-3, 3, 25)]) if C_grid is None else np.asarray(C_grid)
    for Cv in grid:
        reps = build(float(Cv))
        if all(r.passed for r in reps):
            return HarnackResult(reps, float(Cv), True, True)
    return HarnackResult(build(float(grid[-1])), None, False, True)
