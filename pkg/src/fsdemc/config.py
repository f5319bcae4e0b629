"""TOML experiment configuration.

A config names a model, an optional path drift, simulation parameters, the
analyses to run and one parameter table per analysis::

    schema_version = 1
    seed = 20240611
    analyses = ["martingale"]

    [model]
    name = "ou"

    [drift]
    kind = "constant"
    c = 0.5

    [sim]
    dt = 0.01
    horizon = 2.0
    n_traj = 20000

    [analysis.martingale]
    times = [0.5, 1.0, 2.0]
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import models

SCHEMA_VERSION = 1
ANALYSES = ("martingale", "invariant", "density", "entropy", "si_bounds", "ent_bound", "lsi", "hyper",
            "harnack", "galerkin_sweep")
# analysis -> analyses whose results it consumes
DEPENDENCIES = {
    "density": ("invariant",),
    "entropy": ("density",),
    "si_bounds": ("density",),
    "ent_bound": ("entropy",),
}
DRIFT_KINDS = ("none", "constant", "linear", "integral", "custom-truncated")


class ConfigError(ValueError):
    pass


@dataclass
class SimParams:
    dt: Optional[float] = None
    horizon: float = 1.0
    n_traj: int = 1000
    threads: int = 1
    init: Optional[list] = None


@dataclass
class ExperimentConfig:
    seed: int
    model: str
    model_params: dict = field(default_factory=dict)
    drift: dict = field(default_factory=lambda: {"kind": "none"})
    sim: SimParams = field(default_factory=SimParams)
    analyses: list = field(default_factory=list)
    analysis: dict = field(default_factory=dict)
    output_dir: str = "out"
    name: str = "experiment"
    schema_version: int = SCHEMA_VERSION
    dump_trajectories: bool = False

    def ordered_analyses(self) -> list:
        """Requested analyses in dependency order (simulate, weights, measures, bounds)."""
        return [a for a in ANALYSES if a in self.analyses]

    def params(self, name: str) -> dict:
        return dict(self.analysis.get(name, {}))

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        if self.seed is None or not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed is mandatory and must be an integer")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")
        if self.model not in models.MODEL_NAMES:
            raise ConfigError(f"unknown model {self.model!r}")
        kind = self.drift.get("kind", "none")
        if kind not in DRIFT_KINDS:
            raise ConfigError(f"drift kind must be one of {DRIFT_KINDS}")
        for a in self.analyses:
            if a not in ANALYSES:
                raise ConfigError(f"unknown analysis {a!r}")
            if a not in self.analysis:
                raise ConfigError(f"analysis {a!r} requested without an [analysis.{a}] table")
            for dep in DEPENDENCIES.get(a, ()):
                if dep not in self.analyses:
                    raise ConfigError(f"analysis {a!r} needs {dep!r}")
        if self.sim.n_traj < 1 or self.sim.threads < 1 or self.sim.horizon <= 0:
            raise ConfigError("sim.n_traj, sim.threads and sim.horizon must be positive")
        if self.sim.dt is not None and self.sim.dt <= 0:
            raise ConfigError("sim.dt must be positive")
        if "martingale" in self.analyses and not self.analysis["martingale"].get("times"):
            raise ConfigError("analysis.martingale needs a nonempty 'times' list")
        if "galerkin_sweep" in self.analyses:
            if self.model != "galerkin_ou":
                raise ConfigError("galerkin_sweep needs model galerkin_ou")
            levels = self.analysis["galerkin_sweep"].get("levels")
            if not levels or list(levels) != sorted(set(levels)):
                raise ConfigError("galerkin_sweep needs strictly ascending 'levels'")


def from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    if "seed" not in d:
        raise ConfigError("seed is mandatory")
    if "schema_version" not in d:
        raise ConfigError("schema_version is mandatory")
    model = d.pop("model", None)
    if not isinstance(model, dict) or "name" not in model:
        raise ConfigError("a [model] table with a name is required")
    model = dict(model)
    name = model.pop("name")
    mparams = dict(model.pop("params", {}))
    mparams.update(model)
    sim = d.pop("sim", {})
    unknown = set(sim) - {"dt", "horizon", "n_traj", "threads", "init"}
    if unknown:
        raise ConfigError(f"unknown sim keys {sorted(unknown)}")
    output = d.pop("output", {})
    cfg = ExperimentConfig(
        seed=d.pop("seed"), model=name, model_params=mparams, drift=dict(d.pop("drift", {"kind": "none"})),
        sim=SimParams(**sim), analyses=list(d.pop("analyses", [])), analysis=dict(d.pop("analysis", {})),
        output_dir=output.get("dir", d.pop("output_dir", "out")), name=d.pop("name", "experiment"),
        schema_version=d.pop("schema_version"), dump_trajectories=bool(output.get("dump_trajectories", False)),
    )
    if d:
        raise ConfigError(f"unknown top-level keys {sorted(d)}")
    cfg.validate()
    return cfg


def load(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(raw)


# ---------------------------------------------------------------------------
# drift construction


def _pad_vector(c, m):
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if c.size > m:
        raise ConfigError(f"constant drift has {c.size} entries, noise dimension is {m}")
    return np.concatenate([c, np.zeros(m - c.size)])


def _pad_matrix(B, m, d):
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape[0] > m or B.shape[1] > d:
        raise ConfigError(f"drift matrix {B.shape} exceeds {(m, d)}")
    out = np.zeros((m, d))
    out[: B.shape[0], : B.shape[1]] = B
    return out


def _h_function(table: dict, m: int, d: int):
    kind = table.get("h", "linear")
    if kind == "linear":
        B = _pad_matrix(table.get("B", 1.0), m, d)
        return lambda x: x @ B.T
    if kind == "tanh":
        s = float(table.get("scale", 1.0))
        if m != d:
            raise ConfigError("tanh integrand needs m == d")
        return lambda x: s * np.tanh(x)
    if kind == "sin":
        s = float(table.get("scale", 1.0))
        if m != d:
            raise ConfigError("sin integrand needs m == d")
        return lambda x: s * np.sin(x)
    raise ConfigError(f"unknown integrand {kind!r}")


def build_drift(table: dict, model: models.ModelSpec) -> Optional[models.PathDrift]:
    """PathDrift from a ``[drift]`` table.  Short vectors and matrices are
    zero-padded, so one table serves every Galerkin level."""
    table = dict(table)
    kind = table.get("kind", "none")
    m, d = model.m, model.d
    if kind == "none":
        return None
    if kind == "constant":
        return models.constant_drift(_pad_vector(table.get("c", 0.0), m))
    if kind == "linear":
        theta = float(table.get("theta", 0.0))
        return models.linear_drift(_pad_matrix(table.get("B", 1.0), m, d), theta=theta,
                                   tau=model.tau if theta != 0 else 0.0)
    if kind == "integral":
        return models.integral_drift(_h_function(table, m, d), model.tau, m)
    if kind == "custom-truncated":
        base = table.get("base")
        if not isinstance(base, dict) or base.get("kind") in (None, "none", "custom-truncated"):
            raise ConfigError("custom-truncated drift needs a [drift.base] table with a concrete kind")
        return models.truncate_drift(build_drift(base, model), float(table.get("level", 1.0)))
    raise ConfigError(f"unknown drift kind {kind!r}")
