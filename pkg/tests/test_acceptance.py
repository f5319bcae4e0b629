"""End-to-end acceptance criteria.

Each test prints one ``criterion N: PASS|FAIL`` line (also collected in the
pytest terminal summary).  Run on its own with::

    python tests/test_acceptance.py
"""

from __future__ import annotations

import gc
import json
import math
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

import oracles
from fsdemc import cli, config, girsanov, inequalities as ineq, measures, models
from fsdemc.integrate import SimConfig, simulate
from fsdemc.quadrature import mu0_quadrature

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SQ2 = math.sqrt(2.0)


def report(n: int, ok: bool, what: str, detail: str = "") -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {what}" + (f"  [{detail}]" if detail else "")
    print(line)
    ACCEPTANCE_LINES.append(line)


# 1 ------------------------------------------------------------------------


def test_girsanov_oracle_equivalence():
    ou = models.build_model("ou")
    Z = models.linear_drift([[-0.5]])
    n, dt = 100_000, 1e-3
    init = np.zeros((n, 1))
    fs = {"x": lambda s: s[:, -1, 0], "x^2": lambda s: s[:, -1, 0] ** 2,
          "exp(x/2)": lambda s: np.exp(s[:, -1, 0] / 2)}
    w = simulate(ou, Z, init, SimConfig(dt, 1.0, n, 101, "reference-with-weights", record_stride=None,
                                        store_noise=False))
    d = simulate(ou, Z, init, SimConfig(dt, 1.0, n, 202, "perturbed-direct", record_stride=None,
                                        store_noise=False))
    zs = {}
    for name, f in fs.items():
        a = girsanov.weighted_expectation(w, f, 1.0)
        b = girsanov.weighted_expectation(d, f, 1.0)
        zs[name] = (a.value - b.value) / math.hypot(a.std_error, b.std_error)
    ok = all(abs(z) <= 3 for z in zs.values())
    report(1, ok, "weighted vs perturbed-direct within 3 SE",
           ", ".join(f"{k}: z={v:+.2f}" for k, v in zs.items()))
    assert ok


# 2 ------------------------------------------------------------------------


@pytest.mark.parametrize("case", ["ou", "delay"])
def test_martingale_property(case):
    if case == "ou":
        model = models.build_model("ou")
        Z = models.truncate_drift(models.linear_drift([[1.0]]), 1.0)
    else:
        model = models.build_model("ou", {"tau": 1.0})
        Z = models.truncate_drift(models.linear_drift([[0.3 / SQ2]], theta=-1.0, tau=1.0), 1.0)
    times = [0.5, 1.0, 2.0]
    batch = simulate(model, Z, None, SimConfig(0.01, 2.0, 20_000, 303, "reference-with-weights",
                                               record_stride=50, store_noise=False))
    rep = girsanov.martingale_check(batch, times)
    ok = rep.passed and not any(rep.low_ess) and all(abs(z) <= 3 for z in rep.z_score)
    report(2, ok, f"E R(t) = 1 within 3 SE on {case}", ", ".join(f"z={z:+.2f}" for z in rep.z_score))
    assert ok


# 3 ------------------------------------------------------------------------


def test_nelson_hypercontractivity():
    ou = models.build_model("ou")
    t0 = 0.5
    p0 = ineq.nelson_p0(t0)
    crit = ineq.hyper_norm(ou, t0, p0)
    sup = ineq.hyper_norm(ou, t0, p0, exponent=1 + math.exp(2 * t0) + 0.5)
    ok = crit.value <= 1 + 1e-3 and sup.value >= 1 + 1e-3
    report(3, ok, "critical norm <= 1 + 1e-3, supercritical exceeds 1 + 1e-3",
           f"critical {crit.value:.6f}, supercritical {sup.value:.4f}")
    assert ok


# 4 ------------------------------------------------------------------------


def test_gaussian_lsi_tightness():
    ou = models.build_model("ou")
    res = ineq.lsi_test(ou, ineq.exponential_family((0.5, 1.0, 2.0)), kappa=1.0)
    gaps = [abs(r.lhs - r.rhs) for r in res.reports]
    exact = [abs(r.lhs - oracles.gaussian_lsi_exponential(a)[0]) for r, a in zip(res.reports, (0.5, 1.0, 2.0))]
    ok = max(gaps) <= 1e-6 and max(exact) <= 1e-6 and abs(res.kappa_hat - 1) <= 1e-4
    report(4, ok, "LSI equality for exponentials, kappa_hat = 1",
           f"max gap {max(gaps):.1e}, kappa_hat {res.kappa_hat:.8f}")
    assert ok


# 5 ------------------------------------------------------------------------


def test_threshold_constants():
    checks = {}
    checks["lambda(k, 0) = k"] = all(ineq.lambda_kappa_tau(k, 0.0) == k for k in (0.1, 1.0, 3.7))
    lb = ineq.lambda_kappa_tau(1.0, 1.0)
    ls = oracles.lambda_grid_scan(1.0, 1.0)
    checks["bisection vs scan"] = abs(lb - ls) <= 1e-6
    worst_boundary, worst_lower = 0.0, float("inf")
    for kappa in (0.5, 1.0, 2.0, 4.0):
        for tau in (0.1, 0.5, 1.0, 2.0, 5.0):
            lc = ineq.lambda_kappa_tau(kappa, tau)
            qb = ineq.q_lambda(lc, kappa, tau)
            worst_boundary = max(worst_boundary, abs(qb - 2 * math.sqrt(lc) / (math.sqrt(lc) - math.sqrt(kappa))))
            for s in (0.0, 0.01, 0.1, 1.0, 10.0):
                lam = lc * (1 + s)
                qv = ineq.q_lambda(lam, kappa, tau)
                worst_lower = min(worst_lower, qv - math.sqrt(lam) / (math.sqrt(lam) - math.sqrt(kappa)))
    checks["boundary identity"] = worst_boundary <= 1e-8
    checks["lower bound on grid"] = worst_lower >= 0
    ok = all(checks.values())
    report(5, ok, "threshold and q constants",
           f"lambda_1,1 {lb:.9f} vs scan {ls:.9f}, boundary err {worst_boundary:.1e}, min margin {worst_lower:.3g}")
    assert ok


# 6, 7 ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def shifted(tmp_path_factory):
    cfg = config.load(CONFIGS / "ou-shifted.toml")
    rep = cli.run_experiment(cfg, tmp_path_factory.mktemp("ou-shifted"))
    gc.collect()
    return rep.to_dict()["results"]


def test_shifted_gaussian_si_equality(shifted):
    c = 0.5
    si = shifted["si_bounds"]
    e_log, e_sqrt = si["dirichlet_log"]["value"], si["dirichlet_sqrt"]["value"]
    reps = si["reports"]
    sqrt_b = [(r["inputs"]["lambda"], r["rhs"]) for r in reps if r["name"] == "si_sqrt"]
    log_b = [r["rhs"] for r in reps if r["name"] == "si_log"]
    lams, sb = zip(*sqrt_b)
    approaching = all(np.diff(sb) < 0) and sb[-1] - e_sqrt < 0.05 * c * c
    ok = (abs(e_log - 4 * c * c) <= 0.05 * 4 * c * c and abs(e_sqrt - c * c) <= 0.05 * c * c
          and all(e_sqrt <= b for b in sb) and all(e_log <= b for b in log_b) and approaching
          and all(l > 1.0 for l in lams))
    report(6, ok, "Dirichlet energies at the SI equality case",
           f"log {e_log:.4f} (4c^2=1), sqrt {e_sqrt:.4f} (c^2=0.25), sqrt bound at lambda={lams[-1]:g}: {sb[-1]:.4f}")
    assert ok


def test_entropy_bound(shifted):
    c = 0.5
    ent = shifted["entropy"]["relative_entropy"]["value"]
    reps = shifted["ent_bound"]["reports"]
    admissible = [r for r in reps if r["precondition_ok"]]
    ok = abs(ent - c * c) <= 0.02 and len(admissible) > 0
    for r in reps:
        i = r["inputs"]
        den = 2 * i["lambda"] * (i["p0"] - 1) - (3 * i["p0"] - 1) * (i["t0"] + i["tau"])
        ok = ok and (r["precondition_ok"] == (den > 0))
        if r["precondition_ok"]:
            ok = ok and c * c <= r["rhs"] and ent <= r["rhs"]
    report(7, ok, "marginal entropy c^2 and the entropy bound",
           f"entropy {ent:.4f}, {len(admissible)}/{len(reps)} admissible pairs, "
           f"min rhs {min(r['rhs'] for r in admissible):.4f}")
    assert ok


# 8 ------------------------------------------------------------------------


def test_delay_invariant_law():
    model = models.build_model("ou", {"tau": 1.0})
    Z = models.linear_drift([[0.3 / SQ2]], theta=-1.0, tau=1.0)
    nu = measures.cesaro_invariant(model, Z, 1.0, 40, 0.01, 4096, 8080)
    margs = {th: measures.marginal(nu, th) for th in (0.0, -0.5, -1.0)}
    del nu
    ref = oracles.delay_direct(0.3, 1.0, 0.01, 1000, 11_000, 1000, 8081)
    y = ref.reshape(-1)
    m0 = margs[0.0]
    ks = oracles.weighted_ecdf_distance(m0.states()[:, 0], m0.weights(), y)
    mo = m0.moments(0)
    chain_mean = ref.mean(axis=0)
    ref_mean, ref_mean_se = y.mean(), chain_mean.std(ddof=1) / math.sqrt(ref.shape[1])
    chain_var = ((ref - ref_mean) ** 2).mean(axis=0)
    ref_var, ref_var_se = chain_var.mean(), chain_var.std(ddof=1) / math.sqrt(ref.shape[1])
    z_mean = (mo["mean"] - ref_mean) / math.hypot(mo["mean_se"], ref_mean_se)
    z_var = (mo["var"] - ref_var) / math.hypot(mo["var_se"], ref_var_se)
    ks_theta = max(measures.measure_ks(margs[a], margs[b]) for a, b in ((0.0, -0.5), (0.0, -1.0), (-0.5, -1.0)))
    ok = ks < 0.02 and abs(z_mean) <= 3 and abs(z_var) <= 3 and ks_theta < 0.02
    report(8, ok, "delay invariant law vs 1e7-step direct simulation",
           f"KS {ks:.4f}, var {mo['var']:.4f} vs {ref_var:.4f} (z={z_var:+.2f}), mean z={z_mean:+.2f}, "
           f"theta KS {ks_theta:.4f}")
    assert ok


# 9 ------------------------------------------------------------------------


def test_hamiltonian_covariance():
    model = models.build_model("hamiltonian", {"d": 1})
    lyap = oracles.lyapunov_kron(model.linear_A, model.sigma_matrix)
    n, dt = 8000, 0.001
    batch = simulate(model, None, np.zeros((n, 2)), SimConfig(dt, 30.0, n, 909, record_stride=500,
                                                               store_noise=False))
    x = batch.paths[:, 20:]  # t >= 10
    prod = np.einsum("nki,nkj->nij", x, x) / x.shape[1]
    est, se = prod.mean(axis=0), prod.std(axis=0, ddof=1) / math.sqrt(n)
    z = (est - lyap) / se
    ok = np.all(np.abs(z) <= 4) and np.allclose(model.mu0_cov, lyap, atol=1e-12)
    report(9, bool(ok), "hamiltonian covariance vs Lyapunov solution within 4 SE",
           f"cov {np.round(est, 4).tolist()}, z {np.round(z, 2).tolist()}")
    assert ok


# 10 -----------------------------------------------------------------------


def test_gruschin_sanity():
    model = models.build_model("gruschin", {"l": 1, "power": 2})
    n = 2000
    batch = simulate(model, None, np.tile([0.5, 0.5], (n, 1)),
                     SimConfig(model.default_dt, 30.0, n, 1010, record_stride=20, store_noise=False))
    x = batch.paths[:, 100:].reshape(-1, 2)
    ks = [measures.weighted_ks(x[:, a], cdf=models.mu0_marginal_cdf(model, a)) for a in range(2)]
    res = ineq.lsi_test(model, beta=0.0, quad=mu0_quadrature(model))
    bounded = all(r.lhs <= res.kappa_hat * r.inputs["dirichlet"] + 1e-9 for r in res.reports)
    ok = max(ks) < 0.05 and math.isfinite(res.kappa_hat) and res.beta == 0.0 and bounded and batch.n_flagged == 0
    report(10, ok, "gruschin long-run marginals and finite kappa_hat",
           f"KS {ks[0]:.4f}, {ks[1]:.4f}; kappa_hat {res.kappa_hat:.4f}")
    assert ok


# 11 -----------------------------------------------------------------------


def test_galerkin_sweep(tmp_path):
    cfg = config.load(CONFIGS / "galerkin-sweep.toml")
    res = cli.galerkin_sweep(cfg, tmp_path).to_dict()["results"]["galerkin_sweep"]
    lv = {r["level"]: r for r in res["levels"]}
    z_levels = [lv[k]["z_vs_analytic"] for k in (2, 4, 8)]
    z_cross = [c["z"] for c in res["cross_level"]]
    ok = (res["status"] == "PASS" and all(abs(z) <= 4 for z in z_levels) and all(abs(z) < 3 for z in z_cross)
          and abs(res["analytic_mode1_var"] - 0.5) < 1e-15)
    report(11, ok, "mode-1 variance at levels 2, 4, 8 and cross-level drift",
           f"level z {[round(z, 2) for z in z_levels]}, cross z {[round(z, 2) for z in z_cross]}")
    assert ok


# 12 -----------------------------------------------------------------------


def test_determinism_across_threads(tmp_path):
    raw = {
        "schema_version": 1, "seed": 1212, "analyses": ["martingale", "invariant", "density", "entropy"],
        "model": {"name": "ou", "tau": 0.5},
        "drift": {"kind": "custom-truncated", "level": 2.0,
                  "base": {"kind": "linear", "B": [[0.4]], "theta": -0.5}},
        "sim": {"dt": 0.01, "n_traj": 9000},
        "analysis": {"martingale": {"times": [0.5, 1.0]}, "invariant": {"n_blocks": 4, "ks_max": 0.05},
                     "density": {}, "entropy": {}},
    }
    outs = []
    for threads in (1, 8):
        cfg = config.from_dict(raw)
        cfg.sim.threads = threads
        rep = cli.run_experiment(cfg, tmp_path / f"t{threads}")
        tables = {p.name: p.read_bytes() for p in sorted((tmp_path / f"t{threads}" / "tables").iterdir())}
        outs.append((rep.numeric_json(), tables))
    ok = outs[0][0] == outs[1][0] and outs[0][1] == outs[1][1]
    report(12, ok, "byte-identical report numerics for 1 and 8 threads",
           f"{len(outs[0][0])} bytes of numerics, {len(outs[0][1])} tables")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
