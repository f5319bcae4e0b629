"""Integration against mu0: tensor Gauss–Hermite for Gaussian references,
refining tensor trapezoid rules on a high-mass box otherwise."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .models import ModelSpec, mu0_box


class QuadratureError(RuntimeError):
    pass


def gaussian_rule(mean, cov, order: int = 64):
    """Nodes ``(K, d)`` and probability weights ``(K,)`` for ``N(mean, cov)``.

    Uses the symmetric square root of ``cov`` so that singular covariances
    are allowed.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = cov.shape[0]
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (d,))
    if order**d > 2_000_000:
        raise QuadratureError(f"tensor rule with {order}^{d} nodes is too large")
    x1, w1 = np.polynomial.hermite_e.hermegauss(order)
    w1 = w1 / np.sqrt(2 * np.pi)
    grids = np.meshgrid(*([x1] * d), indexing="ij")
    xi = np.stack([g.reshape(-1) for g in grids], axis=1)
    w = np.ones(())
    for _ in range(d):
        w = np.multiply.outer(w, w1)
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    return mean + xi @ root.T, w.reshape(-1)


class GaussHermite:
    def __init__(self, cov, order: int = 64):
        self.nodes, self.weights = gaussian_rule(np.zeros(np.atleast_2d(cov).shape[0]), cov, order)
        self.tag = f"gauss-hermite order {order}"

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        vals = np.asarray(fn(self.nodes), dtype=float)
        return np.tensordot(self.weights, vals, axes=(0, 0))


def _trapezoid_rule(box, n):
    axes = [np.linspace(lo, hi, n) for lo, hi in box]
    ws = []
    for a in axes:
        w = np.full(n, a[1] - a[0])
        w[0] = w[-1] = (a[1] - a[0]) / 2
        ws.append(w)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
    w = np.ones(())
    for wi in ws:
        w = np.multiply.outer(w, wi)
    return pts, w.reshape(-1)


class AdaptiveBox:
    """Tensor trapezoid on a mu0 mass box with resolution doubling.

    The integrand does not vanish at the box edge, so plain trapezoid sums
    converge only at second order; successive levels are combined by
    Richardson extrapolation (Romberg) and refinement stops once the two
    newest extrapolants agree to ``rtol`` (relative) or ``atol``.
    """

    def __init__(self, model: ModelSpec, mass: float = 0.9999, rtol: float = 1e-9,
                 atol: float = 1e-12, n_start: int = 33, n_max: int = 2049):
        self.model = model
        self.box = mu0_box(model, mass)
        self.rtol, self.atol = rtol, atol
        self.n_start, self.n_max = n_start, n_max
        self.tag = f"romberg-extrapolated trapezoid, {mass} mass box, rtol {rtol}"
        self.levels_used = None

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        table = []
        n = self.n_start
        while n <= self.n_max:
            pts, w = _trapezoid_rule(self.box, n)
            dens = np.exp(self.model.log_mu0(pts))
            vals = np.asarray(fn(pts), dtype=float)
            row = [np.tensordot(w * dens, vals, axes=(0, 0))]
            for j, prev in enumerate(table[-1] if table else []):
                f = 4.0 ** (j + 1)
                row.append((f * row[j] - prev) / (f - 1))
            if table:
                a, b = row[-1], table[-1][-1]
                if np.all(np.abs(a - b) <= self.atol + self.rtol * np.abs(a)):
                    self.levels_used = n
                    return a
            table.append(row)
            n = 2 * n - 1
        raise QuadratureError(f"trapezoid rule did not converge up to {self.n_max} nodes per axis")


def mu0_quadrature(model: ModelSpec, order: int = 64, **kwargs):
    """Gauss–Hermite when mu0 is Gaussian, adaptive box trapezoid otherwise."""
    if model.mu0_cov is not None:
        return GaussHermite(model.mu0_cov, order)
    return AdaptiveBox(model, **kwargs)
