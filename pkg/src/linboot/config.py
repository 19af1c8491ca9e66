"""Run configuration for the command-line pipeline.

Every tunable constant lives in :class:`RunConfig`. Values come from, in
increasing precedence: the defaults below, ``LINBOOT_WORKERS`` (worker count
only), a YAML config file, and ``--set key=value`` overrides.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

import yaml

from .bootstrap import MODES, BootstrapConfig
from .model import Priors
from .optimize import Schedule

PUBLISHED = "published"
ARTIFACT = "artifact"


def _default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)


@dataclass(frozen=True)
class RunConfig:
    # model
    K: int = 30
    degree: int = 3
    df: int = 7
    alpha: float = 2.0
    beta_mean: float = 0.38
    beta_var: float = 10.0
    b_mean: float = 0.0
    b_var: float = 10.0
    tau_shape: float = 0.1
    tau_scale: float = 10.0
    # optimizer
    bfgs_iters: int = 300
    newton_iters: int = 500
    gtol: float = 1e-8
    precondition_refresh: int = 50
    n_restarts: int = 200
    # bootstrap
    n_boot: int = 200
    cold_restarts: int = 10
    modes: tuple = MODES
    master_seed: int = 0
    evaluate_linear_kl: bool = False
    workers: int = 1
    # reporting
    pair_genes: int = 100
    sd_threshold: float = 0.03
    # simulation
    sim_genes: int = 100
    sim_clusters: int = 3
    sim_separation: float = 5.0
    sim_noise_sd: float = 1.0
    sim_times: int = 14
    sim_replicates: int = 1
    sim_seed: int = 0
    # paths, relative to the working directory
    data: str = "data.csv"
    truth: str = "truth.json"
    fit: str = "fit.json"
    replicates: str = "replicates.csv"
    timings: str = "timings.csv"
    zetas: str = "zetas.csv"
    report_dir: str = "report"

    def __post_init__(self):
        if isinstance(self.modes, str):
            object.__setattr__(self, "modes", tuple(m.strip() for m in self.modes.split(",")
                                                    if m.strip()))
        else:
            object.__setattr__(self, "modes", tuple(self.modes))
        self.validate()

    def validate(self):
        positive = ("K", "df", "n_restarts", "n_boot", "cold_restarts", "workers",
                    "bfgs_iters", "precondition_refresh", "sim_genes", "sim_clusters",
                    "sim_times", "sim_replicates", "pair_genes")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.degree < 0 or self.df <= self.degree:
            raise ValueError("need degree >= 0 and df > degree")
        if self.newton_iters < 0:
            raise ValueError("newton_iters must be non-negative")
        if not self.gtol > 0 or self.sd_threshold < 0:
            raise ValueError("gtol must be positive and sd_threshold non-negative")
        bad = set(self.modes) - set(MODES)
        if bad or not self.modes:
            raise ValueError(f"modes must be a non-empty subset of {list(MODES)}")
        self.priors()

    # -- derived objects -------------------------------------------------
    def priors(self) -> Priors:
        return Priors(self.alpha, self.beta_mean, self.beta_var, self.b_mean,
                      self.b_var, self.tau_shape, self.tau_scale)

    def schedule(self) -> Schedule:
        return Schedule(bfgs_iters=self.bfgs_iters, newton_iters=self.newton_iters,
                        gtol=self.gtol, precondition_refresh=self.precondition_refresh)

    def bootstrap(self) -> BootstrapConfig:
        return BootstrapConfig(n_boot=self.n_boot, modes=self.modes,
                               master_seed=self.master_seed,
                               cold_restarts=self.cold_restarts, schedule=self.schedule(),
                               evaluate_linear_kl=self.evaluate_linear_kl,
                               workers=self.workers)

    def path(self, workdir, key) -> Path:
        return Path(workdir) / getattr(self, key)


PROVENANCE = {
    "K": (PUBLISHED, "truncation level"),
    "degree": (PUBLISHED, "B-spline degree"),
    "df": (PUBLISHED, "B-spline degrees of freedom"),
    "alpha": (PUBLISHED, "DP concentration"),
    "beta_mean": (PUBLISHED, "prior mean of spline coefficients"),
    "beta_var": (PUBLISHED, "prior variance of spline coefficients (precision 0.1)"),
    "b_mean": (PUBLISHED, "prior mean of gene offsets"),
    "b_var": (PUBLISHED, "prior variance of gene offsets (precision 0.1)"),
    "tau_shape": (PUBLISHED, "Gamma shape of the noise precision prior"),
    "tau_scale": (PUBLISHED, "Gamma scale of the noise precision prior"),
    "bfgs_iters": (PUBLISHED, "BFGS iterations before the Newton stage"),
    "newton_iters": (ARTIFACT, "maximum trust-region Newton iterations"),
    "gtol": (ARTIFACT, "convergence tolerance on the gradient inf-norm"),
    "precondition_refresh": (ARTIFACT, "Newton iterations between preconditioner refreshes"),
    "n_restarts": (PUBLISHED, "K-means restarts for the base fit"),
    "n_boot": (PUBLISHED, "bootstrap replicates"),
    "cold_restarts": (PUBLISHED, "K-means restarts per cold-start replicate"),
    "modes": (PUBLISHED, "bootstrap estimators to run"),
    "master_seed": (ARTIFACT, "seed for restarts and bootstrap weights"),
    "evaluate_linear_kl": (ARTIFACT, "evaluate the weighted KL at linear estimates"),
    "workers": (ARTIFACT, "worker processes (default: available CPUs, env LINBOOT_WORKERS)"),
    "pair_genes": (ARTIFACT, "genes whose pairs enter the co-clustering SD table"),
    "sd_threshold": (PUBLISHED, "co-clustering SD reporting threshold"),
    "sim_genes": (ARTIFACT, "simulated genes"),
    "sim_clusters": (ARTIFACT, "true clusters in simulated data"),
    "sim_separation": (ARTIFACT, "cluster coefficient spread in noise SDs"),
    "sim_noise_sd": (ARTIFACT, "simulated observation noise SD"),
    "sim_times": (ARTIFACT, "distinct simulated time points"),
    "sim_replicates": (ARTIFACT, "simulated measurements per time point"),
    "sim_seed": (ARTIFACT, "simulation seed"),
    "data": (ARTIFACT, "expression CSV"),
    "truth": (ARTIFACT, "simulation truth JSON"),
    "fit": (ARTIFACT, "fit archive JSON"),
    "replicates": (ARTIFACT, "replicate table CSV"),
    "timings": (ARTIFACT, "replicate wall-time table CSV"),
    "zetas": (ARTIFACT, "replicate cluster probabilities CSV"),
    "report_dir": (ARTIFACT, "directory for report tables"),
}


def _format_default(value):
    if isinstance(value, tuple):
        return ",".join(value)
    return repr(value) if isinstance(value, str) else str(value)


def describe_keys() -> str:
    defaults = RunConfig(workers=1)
    lines = []
    for f in fields(RunConfig):
        source, text = PROVENANCE[f.name]
        value = "CPUs" if f.name == "workers" else _format_default(getattr(defaults, f.name))
        lines.append(f"  {f.name:<21} {value:<16} [{source}] {text}")
    return "\n".join(lines)


def _coerce(name, value):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    if kind == "tuple":
        if isinstance(value, str):
            return tuple(m.strip() for m in value.split(",") if m.strip())
        return tuple(value)
    if kind == "bool":
        if isinstance(value, str):
            lowered = value.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"{name}: expected a boolean, got {value!r}")
            return lowered in ("true", "1", "yes")
        return bool(value)
    if kind == "int":
        if isinstance(value, bool) or float(value) != int(float(value)):
            raise ValueError(f"{name}: expected an integer, got {value!r}")
        return int(float(value))
    if kind == "float":
        return float(value)
    return str(value)


def _apply(config: RunConfig, updates: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(updates) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    try:
        coerced = {k: _coerce(k, v) for k, v in updates.items()}
    except (TypeError, ValueError) as exc:
        raise ValueError(str(exc)) from None
    return replace(config, **coerced)


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"override {item!r} is not of the form key=value")
        out[key.strip()] = yaml.safe_load(value) if value.strip() else ""
    return out


def load_config(path=None, overrides=None, environ=None) -> RunConfig:
    """Build a validated :class:`RunConfig`."""
    environ = os.environ if environ is None else environ
    config = RunConfig(workers=_default_workers())
    env_workers = environ.get("LINBOOT_WORKERS")
    if env_workers:
        config = _apply(config, {"workers": env_workers})
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        doc = yaml.safe_load(path.read_text()) or {}
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a mapping of key: value")
        config = _apply(config, doc)
    return _apply(config, overrides or {})


def dump_config(config: RunConfig) -> str:
    doc = {f.name: (list(v) if isinstance(v := getattr(config, f.name), tuple) else v)
           for f in fields(RunConfig)}
    return yaml.safe_dump(doc, sort_keys=False)
