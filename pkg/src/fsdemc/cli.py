"""Command-line experiment runner.

Subcommands::

    fsdemc run CONFIG        run the analyses listed in a TOML config
    fsdemc sweep CONFIG      run only the Galerkin truncation sweep
    fsdemc validate CONFIG   parse and check a config without running it
    fsdemc bounds ...        evaluate the closed-form bound constants

``run`` and ``sweep`` write ``report.json`` and ``tables/*.csv`` to the
output directory and exit nonzero when any checked analysis fails or could
not be evaluated.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, config as cfgmod, girsanov, inequalities as ineq, measures, models, paths, rng
from .integrate import SimConfig, SimulationError, dump_trajectories, sample_mu, simulate
from .quadrature import QuadratureError

PASS, FAIL, INFO, ERROR = "PASS", "FAIL", "INFO", "ERROR"
SCHEMA_PATH = Path(__file__).with_name("schemas") / "report.schema.json"
_EXPECTED_ERRORS = (cfgmod.ConfigError, ineq.PreconditionError, measures.EstimationError, QuadratureError,
                    SimulationError, paths.GridError, models.ModelError, girsanov.WeightError)


def clean(obj):
    """Convert to JSON-ready values; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if dataclasses.is_dataclass(obj):
        return clean(obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj))
    return obj


def q(value, std_error=None, tag=None) -> dict:
    """A reported number with its uncertainty or an accuracy tag."""
    out = {"value": value}
    if std_error is not None:
        out["std_error"] = std_error
    if tag is not None:
        out["tag"] = tag
    return out


@dataclasses.dataclass
class RunReport:
    config: dict
    results: dict
    diagnostics: dict
    wall_time_s: float
    version: str = __version__

    @property
    def passed(self) -> bool:
        return all(r.get("status") in (PASS, INFO) for r in self.results.values())

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def to_dict(self) -> dict:
        return clean({
            "schema_version": cfgmod.SCHEMA_VERSION,
            "tool": {"name": "fsdemc", "version": self.version},
            "config": self.config,
            "results": self.results,
            "diagnostics": self.diagnostics,
            "passed": self.passed,
            "exit_code": self.exit_code,
            "wall_time_s": self.wall_time_s,
        })

    def numeric_json(self) -> str:
        """Canonical serialisation of the sections that must be reproducible."""
        d = self.to_dict()
        return json.dumps({"results": d["results"], "diagnostics": d["diagnostics"]}, sort_keys=True)


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([clean(v) for v in r])


class _Run:
    """Shared state for the analyses of one config."""

    def __init__(self, cfg: cfgmod.ExperimentConfig, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        self.tables = out_dir / "tables"
        self.model = models.build_model(cfg.model, cfg.model_params)
        self.Z = cfgmod.build_drift(cfg.drift, self.model)
        self.dt = cfg.sim.dt or self.model.default_dt
        self.threads = cfg.sim.threads
        self.measure = None
        self.rho = None
        self.ent = None
        self._mu_segments = None
        self._mgf_cache = {}

    def seed(self, *labels) -> int:
        return rng.derive_seed(self.cfg.seed, *labels)

    def init(self):
        if self.cfg.sim.init is not None:
            return np.asarray(self.cfg.sim.init, dtype=float)
        return None

    def mu_segments(self, n):
        if self._mu_segments is None or self._mu_segments.shape[0] != n:
            self._mu_segments = sample_mu(self.model, n, self.dt, self.seed("mu-samples"), threads=self.threads)
        return self._mu_segments

    def log_mgf(self, lam, n):
        if self.Z is None:
            return 0.0, 0.0
        key = (float(lam), n)
        if key not in self._mgf_cache:
            r = measures.exp_integrability(self.mu_segments(n), self.Z, lam)
            self._mgf_cache[key] = (r.log_value, r.std_error / r.value if r.value > 0 else float("inf"))
        return self._mgf_cache[key]

    # -- analyses ----------------------------------------------------------

    def martingale(self, p):
        times = [float(t) for t in p["times"]]
        n = int(p.get("n_traj", self.cfg.sim.n_traj))
        horizon = max(times)
        steps = [paths.steps_for(t, self.dt) for t in times]
        stride = int(np.gcd.reduce(steps))
        mode = "reference-with-weights"
        sim = SimConfig(self.dt, horizon, n, self.seed("martingale"), mode, self.threads, stride, False)
        batch = simulate(self.model, self.Z, self.init(), sim)
        rep = girsanov.martingale_check(batch, times, float(p.get("z_max", 3.0)))
        diag = girsanov.integrability_diagnostic(batch, float(p.get("threshold", 10.0)))
        diag.pop("integrals")
        _write_csv(self.tables / "martingale.csv", ["t", "mean_weight", "std_error", "z", "ess", "low_ess"],
                   zip(rep.times, rep.mean_weight, rep.std_error, rep.z_score, rep.ess, rep.low_ess))
        return {
            "status": PASS if rep.passed else FAIL,
            "times": rep.times,
            "mean_weight": [q(m, s) for m, s in zip(rep.mean_weight, rep.std_error)],
            "z_score": rep.z_score, "ess": rep.ess, "low_ess": rep.low_ess,
            "n_flagged": batch.n_flagged,
            "integrability": diag,
        }

    def invariant(self, p):
        c = float(p.get("block", 1.0))
        nb = int(p["n_blocks"])
        n = int(p.get("n_traj", self.cfg.sim.n_traj))
        thr = p.get("ess_threshold", 0.5)
        thr = None if thr in (False, "none", None) else float(thr)
        island = int(p.get("island_size", 64))
        init = self.init()
        if init is not None:
            lag = paths.steps_for(self.model.tau, self.dt)
            init = np.broadcast_to(init.reshape(1, 1, -1), (n, lag + 1, self.model.d)).copy()
        self.measure = measures.cesaro_invariant(self.model, self.Z, c, nb, self.dt, n, self.seed("invariant"),
                                                 self.threads, init, thr, island)
        tau = self.model.tau
        thetas = p.get("thetas", [0.0, -tau / 2, -tau] if tau > 0 else [0.0])
        thetas = sorted({float(t) for t in thetas}, reverse=True)
        margs = {th: measures.marginal(self.measure, th) for th in thetas}
        rows, stats = [], {}
        for th, mg in margs.items():
            per_axis = []
            for ax in range(self.model.d):
                mo = mg.moments(ax)
                rows.append([th, ax, mo["mean"], mo["mean_se"], mo["var"], mo["var_se"]])
                per_axis.append({"mean": q(mo["mean"], mo["mean_se"]), "var": q(mo["var"], mo["var_se"])})
            stats[f"{th:g}"] = per_axis
        _write_csv(self.tables / "invariant_marginals.csv", ["theta", "axis", "mean", "mean_se", "var", "var_se"],
                   rows)
        out = {"marginals": stats, "diagnostics": self.measure.diagnostics}
        status = INFO
        if len(thetas) > 1:
            ks = max(measures.measure_ks(margs[thetas[0]], margs[th], ax)
                     for th in thetas[1:] for ax in range(self.model.d))
            ks_max = float(p.get("ks_max", 0.02))
            out["theta_ks"] = q(ks, tag="weighted two-sample KS")
            out["ks_max"] = ks_max
            status = PASS if ks < ks_max else FAIL
        if self.Z is None:
            out["ks_vs_mu0"] = [q(measures.measure_ks(margs[0.0], None, ax, models.mu0_marginal_cdf(self.model, ax)),
                                  tag="weighted KS against mu0") for ax in range(self.model.d)]
        out["status"] = status
        return out

    def density(self, p):
        mg = measures.marginal(self.measure, float(p.get("theta", 0.0)))
        box = p.get("box")
        self.rho = measures.density_ratio(mg, self.model, p.get("nodes"), p.get("bandwidth"),
                                              float(p.get("mass", 0.999)), box)
        self.rho.to_csv(self.tables / "density.csv")
        return {"status": FAIL if self.rho.flagged else PASS,
                "mass_check": q(self.rho.mass_check, tag="grid trapezoid"),
                "bandwidth": self.rho.bandwidth, "nodes": [a.size for a in self.rho.axes],
                "box": self.rho.diagnostics["box"], "ess": self.rho.diagnostics["ess"]}

    def entropy(self, p):
        tag = "grid trapezoid; time-0 marginal, lower bound for the path-space quantity"
        ent = measures.relative_entropy(self.rho, self.model)
        self.ent = ent
        moments = {f"{float(pp):g}": q(measures.lp_moment(self.rho, float(pp)), tag=tag)
                   for pp in p.get("p_values", [2.0])}
        return {"status": INFO, "relative_entropy": q(ent, tag=tag), "lp_moments": moments}

    def si_bounds(self, p):
        kappa = p.get("kappa", self.model.lsi_kappa)
        if kappa is None:
            raise ineq.PreconditionError("no log-Sobolev constant known for this model; set kappa")
        beta = float(p.get("beta", 0.0))
        n_mu = int(p.get("n_mu", 100_000))
        rtol, atol = float(p.get("rtol", 0.05)), float(p.get("atol", 0.01))
        e_log = measures.dirichlet_energy(self.rho, self.model, "log")
        e_sqrt = measures.dirichlet_energy(self.rho, self.model, "sqrt")
        mz2, mz2_se = measures.mean_z_squared(self.mu_segments(n_mu), self.Z) if self.Z is not None else (0.0, 0.0)
        reports = []
        for lam in p.get("lambdas", [2.0, 5.0, 10.0, 50.0]):
            lam = float(lam)
            lm, _ = self.log_mgf(lam, n_mu)
            try:
                b_sqrt, b_log = ineq.si_bounds(lam, kappa, beta, lm, mz2)
                ok = True
            except ineq.PreconditionError:
                b_sqrt = b_log = float("inf")
                ok = False
            for name, lhs, rhs in (("si_sqrt", e_sqrt, b_sqrt), ("si_log", e_log, b_log)):
                passed = bool(lhs <= rhs * (1 + rtol) + atol) if ok else None
                reports.append(ineq.BoundReport(name, lhs, rhs, ok, {"lambda": lam, "kappa": kappa, "beta": beta},
                                                passed, None, "grid central differences"))
        ineq.reports_to_csv(reports, self.tables / "si_bounds.csv")
        valid = [r for r in reports if r.precondition_ok]
        return {"status": PASS if valid and all(r.passed for r in valid) else FAIL,
                "dirichlet_log": q(e_log, tag="grid central differences"),
                "dirichlet_sqrt": q(e_sqrt, tag="grid central differences"),
                "mean_z2": q(mz2, mz2_se), "rtol": rtol, "atol": atol,
                "reports": [r.to_dict() for r in reports]}

    def ent_bound(self, p):
        n_mu = int(p.get("n_mu", 100_000))
        log_c0 = p.get("log_c0", 0.0 if self.model.name == "ou" else None)
        if log_c0 is None:
            raise ineq.PreconditionError("log_c0 must be given for models without a known hypercontractive norm")
        reports = []
        for t0 in p.get("t0_values", [0.25, 0.5, 1.0]):
            p0 = float(p.get("p0", ineq.nelson_p0(float(t0))))
            for lam in p.get("lambdas", [2.0, 5.0, 10.0, 20.0]):
                lm, _ = self.log_mgf(float(lam), n_mu)
                reports.append(ineq.ent_bound_report(self.ent, float(t0), self.model.tau, p0, float(lam), lm,
                                                     float(log_c0)))
        ineq.reports_to_csv(reports, self.tables / "ent_bound.csv")
        valid = [r for r in reports if r.precondition_ok]
        return {"status": PASS if valid and all(r.passed for r in valid) else FAIL,
                "n_admissible": len(valid), "reports": [r.to_dict() for r in reports]}

    def lsi(self, p):
        fam = p.get("family", "default")
        if fam == "exponential":
            family = ineq.exponential_family(tuple(p.get("a_values", (0.5, 1.0, 2.0))), self.model.d)
        else:
            family = ineq.default_family(self.model)
        kappa = p.get("kappa", self.model.lsi_kappa)
        res = ineq.lsi_test(self.model, family, kappa, float(p.get("beta", 0.0)), tol=float(p.get("tol", 1e-6)))
        ineq.reports_to_csv(res.reports, self.tables / "lsi.csv")
        if kappa is not None:
            status = PASS if all(r.passed for r in res.reports) else FAIL
        else:
            status = PASS if math.isfinite(res.kappa_hat) else FAIL
        out = res.to_dict()
        out["kappa_hat"] = q(res.kappa_hat, tag=res.quadrature)
        out["status"] = status
        return out

    def hyper(self, p):
        t0 = float(p.get("t0", 0.5))
        p0 = float(p.get("p0", ineq.nelson_p0(t0) if t0 > 0 else 1.0))
        res = ineq.hyper_norm(self.model, t0, p0, None, int(p.get("n_mc", 256)), p.get("exponent"),
                              self.seed("hyper"))
        tol = float(p.get("tol", 1e-3))
        expect = p.get("expect")
        if expect == "bounded":
            status = PASS if res.value <= 1 + tol else FAIL
        elif expect == "exceeds":
            status = PASS if res.value >= 1 + tol else FAIL
        else:
            status = INFO
        out = res.to_dict()
        out["value"] = q(res.value, tag=res.method)
        out["status"] = status
        return out

    def harnack(self, p):
        pairs = [(np.asarray(a, float), np.asarray(b, float)) for a, b in p["pairs"]]
        res = ineq.harnack_check(self.model, float(p.get("p", 2.0)), float(p.get("t", 1.0)), pairs, None,
                                 p.get("C"), int(p.get("n_mc", 100_000)), self.seed("harnack"))
        ineq.reports_to_csv(res.reports, self.tables / "harnack.csv")
        out = res.to_dict()
        out["status"] = PASS if res.passed else FAIL
        return out

    def galerkin_sweep(self, p):
        levels = [int(n) for n in p["levels"]]
        c = float(p.get("block", 1.0))
        nb = int(p["n_blocks"])
        n = int(p.get("n_traj", self.cfg.sim.n_traj))
        base = dict(self.cfg.model_params)
        top = models.build_model("galerkin_ou", {**base, "n": levels[-1]})
        dt = self.cfg.sim.dt or top.default_dt
        lam1, q1 = top.params["lambdas"][0], top.params["qs"][0]
        analytic = q1**2 / (2 * lam1)
        mode1 = models.build_model("galerkin_ou", {"n": 1, "lambdas": [lam1], "qs": [q1]})
        nodes = int(p.get("nodes", 257))
        rows, per_level, dens = [], [], []
        bw = p.get("bandwidth")
        sd1 = math.sqrt(analytic)
        box = [(-4.0 * sd1, 4.0 * sd1)]
        for lv in levels:
            model = models.build_model("galerkin_ou", {**base, "n": lv})
            Z = cfgmod.build_drift(self.cfg.drift, model)
            mu = measures.cesaro_invariant(model, Z, c, nb, dt, n, self.seed("galerkin", lv), self.threads)
            mg = measures.marginal(mu, 0.0)
            mo = mg.moments(0)
            z = (mo["var"] - analytic) / mo["var_se"]
            m1 = measures.WeightedEmpiricalMeasure(mg.atoms[:, :1], mg.log_weights, mg.groups)
            if bw is None:
                bw = float(measures.silverman_bandwidth(m1.atoms, m1.weights())[0])
            de = measures.density_ratio(m1, mode1, nodes, bw, box=box)
            dens.append(de.rho_values * np.exp(de.log_mu0_values))
            rows.append([lv, mo["mean"], mo["mean_se"], mo["var"], mo["var_se"], analytic, z])
            per_level.append({"level": lv, "mean": q(mo["mean"], mo["mean_se"]), "var": q(mo["var"], mo["var_se"]),
                              "z_vs_analytic": z, "ess": mu.diagnostics["weight_ess"]})
        cross = []
        for a, b in zip(range(len(levels) - 1), range(1, len(levels))):
            va, vb = rows[a][3], rows[b][3]
            se = math.hypot(rows[a][4], rows[b][4])
            cross.append({"levels": [levels[a], levels[b]], "var_change": q(vb - va, se),
                          "z": (vb - va) / se, "density_max_change": float(np.max(np.abs(dens[b] - dens[a])))})
        _write_csv(self.tables / "galerkin_sweep.csv",
                   ["level", "mean", "mean_se", "var", "var_se", "analytic_var", "z"], rows)
        z_max_level, z_max_cross = float(p.get("z_level", 4.0)), float(p.get("z_cross", 3.0))
        ok = all(abs(c_["z"]) < z_max_cross for c_ in cross)
        if self.Z is None:
            ok = ok and all(abs(r[6]) <= z_max_level for r in rows)
        return {"status": PASS if ok else FAIL, "analytic_mode1_var": analytic, "dt": dt,
                "analytic_checked": self.Z is None, "levels": per_level, "cross_level": cross,
                "bandwidth": bw}


def run_experiment(cfg: cfgmod.ExperimentConfig, out_dir=None, only: Optional[list] = None,
                   dump: Optional[bool] = None) -> RunReport:
    """Run the configured analyses in dependency order and write the outputs."""
    t_start = time.perf_counter()
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, out)
    names = cfg.ordered_analyses() if only is None else [a for a in cfg.ordered_analyses() if a in only]
    results, timings = {}, {}
    for name in names:
        t0 = time.perf_counter()
        deps = cfgmod.DEPENDENCIES.get(name, ())
        broken = [d for d in deps if results.get(d, {}).get("status") == ERROR]
        if broken:
            results[name] = {"status": ERROR, "error": f"depends on failed analysis {broken[0]!r}"}
            continue
        try:
            results[name] = getattr(run, name)(cfg.params(name))
        except _EXPECTED_ERRORS as exc:
            results[name] = {"status": ERROR, "error": f"{type(exc).__name__}: {exc}"}
        timings[name] = time.perf_counter() - t0
    diagnostics = {"model": run.model.name, "dt": run.dt, "sampler": run.model.sampler_kind}
    if run.measure is not None:
        diagnostics["invariant"] = {k: v for k, v in run.measure.diagnostics.items()}
    if dump if dump is not None else cfg.dump_trajectories:
        mode = "reference" if run.Z is None else "reference-with-weights"
        sim = SimConfig(run.dt, cfg.sim.horizon, cfg.sim.n_traj, run.seed("dump"), mode, run.threads, 1, False)
        batch = simulate(run.model, run.Z, run.init(), sim)
        dump_trajectories(batch, out / "trajectories")
        diagnostics["dump"] = {"n_flagged": batch.n_flagged, "file": "trajectories.bin"}
    report = RunReport(cfg.to_dict(), results, diagnostics, 0.0)
    report.wall_time_s = time.perf_counter() - t_start
    d = report.to_dict()
    d["timings_s"] = clean(timings)
    (out / "report.json").write_text(json.dumps(d, indent=2, sort_keys=True))
    return report


def galerkin_sweep(cfg: cfgmod.ExperimentConfig, out_dir=None) -> RunReport:
    if "galerkin_sweep" not in cfg.analyses:
        raise cfgmod.ConfigError("config has no galerkin_sweep analysis")
    return run_experiment(cfg, out_dir, only=["galerkin_sweep"], dump=False)


# ---------------------------------------------------------------------------
# argument parsing


def _apply_overrides(cfg: cfgmod.ExperimentConfig, args) -> cfgmod.ExperimentConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.sim.threads = args.threads
    if args.out_dir is not None:
        cfg.output_dir = args.out_dir
    if args.dump_trajectories:
        cfg.dump_trajectories = True
    cfg.validate()
    return cfg


def _bounds(args) -> dict:
    out = {}
    if args.kappa is not None and args.tau is not None:
        lam_c = ineq.lambda_kappa_tau(args.kappa, args.tau)
        out["lambda_kappa_tau"] = lam_c
        if args.lam is not None:
            try:
                out["q_lambda"] = ineq.q_lambda(args.lam, args.kappa, args.tau)
            except ineq.PreconditionError as exc:
                out["q_lambda"] = {"error": str(exc)}
    if args.t0 is not None:
        p0 = args.p0 if args.p0 is not None else ineq.nelson_p0(args.t0)
        out["nelson_p0"] = ineq.nelson_p0(args.t0)
        if args.lam is not None:
            try:
                out["ent_bound"] = ineq.ent_bound(args.t0, args.tau or 0.0, p0, args.lam, args.log_mgf, args.log_c0)
            except ineq.PreconditionError as exc:
                out["ent_bound"] = {"error": str(exc)}
    if args.lam is not None and args.kappa is not None and args.mean_z2 is not None:
        try:
            s, l = ineq.si_bounds(args.lam, args.kappa, args.beta, args.log_mgf, args.mean_z2)
            out["si_bounds"] = {"sqrt": s, "log": l}
        except ineq.PreconditionError as exc:
            out["si_bounds"] = {"error": str(exc)}
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fsdemc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run all analyses of a config"), ("sweep", "run the Galerkin sweep"),
                        ("validate", "check a config")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--out-dir")
        sp.add_argument("--dump-trajectories", action="store_true")
    b = sub.add_parser("bounds", help="evaluate closed-form bound constants")
    b.add_argument("--kappa", type=float)
    b.add_argument("--tau", type=float)
    b.add_argument("--lambda", dest="lam", type=float)
    b.add_argument("--t0", type=float)
    b.add_argument("--p0", type=float)
    b.add_argument("--log-mgf", type=float, default=0.0)
    b.add_argument("--log-c0", type=float, default=0.0)
    b.add_argument("--beta", type=float, default=0.0)
    b.add_argument("--mean-z2", type=float)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "bounds":
        print(json.dumps(clean(_bounds(args)), indent=2, sort_keys=True))
        return 0
    try:
        cfg = _apply_overrides(cfgmod.load(args.config), args)
        if args.command == "validate":
            models.build_model(cfg.model, cfg.model_params)
            print(f"{args.config}: ok ({len(cfg.analyses)} analyses, model {cfg.model})")
            return 0
        report = (galerkin_sweep if args.command == "sweep" else run_experiment)(cfg)
    except (cfgmod.ConfigError, models.ModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for name, res in report.results.items():
        print(f"{res['status']:5s} {name}" + (f"  ({res['error']})" if "error" in res else ""))
    print(f"report: {Path(cfg.output_dir) / 'report.json'}")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
