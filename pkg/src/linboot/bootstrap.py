"""Bootstrap replicates: linear, warm-start and cold-start estimators.

Every replicate ``b`` draws multinomial weights from a seed that depends only
on ``(master_seed, b)``; the same weights are used for every mode so the
estimators are compared on identical resamples. Replicates can run on a
process pool and the results do not depend on the number of workers.
"""

from __future__ import annotations

import logging
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .derivatives import KLObjective
from .errors import OptimizationFailed
from .metrics import fm_index, nmi
from .model import Dataset, Priors, cluster_probs
from .optimize import Schedule, multi_restart, optimize
from .sensitivity import SensitivityMatrix, eta_lin, predict_clustering

logger = logging.getLogger(__name__)

MODES = ("linear", "warm", "cold")
_BOOTSTRAP_STREAM = 1


@dataclass(frozen=True)
class BootstrapConfig:
    n_boot: int = 200
    modes: tuple = MODES
    master_seed: int = 0
    cold_restarts: int = 10
    schedule: Schedule = field(default_factory=Schedule)
    evaluate_linear_kl: bool = False
    workers: int = 1

    def __post_init__(self):
        bad = set(self.modes) - set(MODES)
        if bad:
            raise ValueError(f"unknown bootstrap modes: {sorted(bad)}")
        if self.n_boot < 1 or self.cold_restarts < 1 or self.workers < 1:
            raise ValueError("n_boot, cold_restarts and workers must be positive")


@dataclass
class ReplicateResult:
    replicate: int
    mode: str
    weights_seed: int
    fm: float
    nmi: float
    kl: float
    seconds: float
    converged: bool
    zeta: np.ndarray = field(repr=False, default=None)
    message: str = ""


def sample_weights(n_genes: int, rng: np.random.Generator) -> np.ndarray:
    """Multinomial resampling counts: ``n_genes`` draws over ``n_genes`` genes."""
    if n_genes < 1:
        raise ValueError("n_genes must be at least 1")
    return rng.multinomial(n_genes, np.full(n_genes, 1.0 / n_genes)).astype(float)


def replicate_seed(master_seed: int, index: int) -> int:
    ss = np.random.SeedSequence([master_seed, _BOOTSTRAP_STREAM, index])
    return int(ss.generate_state(1)[0])


def replicate_weights(master_seed: int, index: int, n_genes: int):
    seed = replicate_seed(master_seed, index)
    return seed, sample_weights(n_genes, np.random.default_rng(seed))


def run_replicate(mode: str, w, objective: KLObjective, base_eta, base_zeta,
                  sens: SensitivityMatrix | None, config: BootstrapConfig,
                  replicate: int = 0, weights_seed: int = 0) -> ReplicateResult:
    """One estimate of the refit at weights ``w`` and its similarity to the base.

    ``seconds`` covers the estimation step only (for ``linear``: the affine
    map and the cluster-probability evaluation, with ``S`` already computed).
    """
    data, priors = objective.data, objective.priors
    kl = np.nan
    converged = True
    message = ""
    if mode == "linear":
        if sens is None:
            raise ValueError("linear mode needs a sensitivity matrix")
        start = time.perf_counter()
        eta = eta_lin(sens, w)
        zeta = predict_clustering(eta, data, priors)
        seconds = time.perf_counter() - start
        if config.evaluate_linear_kl:
            kl = objective.value(eta, w)
    elif mode == "warm":
        start = time.perf_counter()
        fit = optimize(objective, base_eta, w, config.schedule)
        zeta = cluster_probs(fit.eta_star, data, priors)
        seconds = time.perf_counter() - start
        kl, converged, message = fit.kl_value, fit.converged, fit.message
    elif mode == "cold":
        start = time.perf_counter()
        try:
            fit = multi_restart(objective, w, config.cold_restarts,
                                master_seed=weights_seed, schedule=config.schedule)
            zeta = cluster_probs(fit.eta_star, data, priors)
            kl = fit.kl_value
        except OptimizationFailed as exc:
            converged, message = False, str(exc)
            zeta = np.full_like(base_zeta, 1.0 / base_zeta.shape[1])
        seconds = time.perf_counter() - start
    else:
        raise ValueError(f"unknown mode {mode!r}")

    return ReplicateResult(
        replicate=replicate, mode=mode, weights_seed=weights_seed,
        fm=fm_index(base_zeta, zeta), nmi=nmi(base_zeta, zeta), kl=float(kl),
        seconds=seconds, converged=bool(converged), zeta=zeta, message=message,
    )


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Context:
    data: Dataset
    priors: Priors
    n_clusters: int
    base_eta: np.ndarray
    S: np.ndarray | None
    config: BootstrapConfig


_worker_state: dict = {}


def _prepare(ctx: _Context):
    objective = KLObjective(ctx.data, ctx.priors, ctx.n_clusters)
    objective.warm_up()
    sens = None if ctx.S is None else SensitivityMatrix(S=ctx.S, eta_star=ctx.base_eta)
    base_zeta = cluster_probs(ctx.base_eta, ctx.data, ctx.priors)
    # Compile the cluster-probability path before anything is timed.
    predict_clustering(ctx.base_eta, ctx.data, ctx.priors)
    return {"ctx": ctx, "objective": objective, "sens": sens, "base_zeta": base_zeta}


def _init_worker(ctx: _Context):
    import linboot  # noqa: F401  (enables float64 in spawned processes)

    _worker_state.update(_prepare(ctx))


def _replicate_all_modes(index: int, state=None) -> list[ReplicateResult]:
    state = state or _worker_state
    ctx = state["ctx"]
    seed, w = replicate_weights(ctx.config.master_seed, index, ctx.data.n_genes)
    return [run_replicate(mode, w, state["objective"], ctx.base_eta, state["base_zeta"],
                          state["sens"], ctx.config, replicate=index, weights_seed=seed)
            for mode in ctx.config.modes]


@dataclass
class BootstrapRun:
    replicates: list
    base_zeta: np.ndarray
    sensitivity_seconds: float = float("nan")

    def by_mode(self, mode, converged_only=True) -> list[ReplicateResult]:
        return [r for r in self.replicates
                if r.mode == mode and (r.converged or not converged_only)]

    def summary(self) -> dict:
        out = {}
        for mode in dict.fromkeys(r.mode for r in self.replicates):
            ok = self.by_mode(mode)
            failed = len(self.by_mode(mode, converged_only=False)) - len(ok)
            out[mode] = {
                "n": len(ok),
                "n_failed": failed,
                "median_seconds": float(np.median([r.seconds for r in ok])) if ok else np.nan,
                "fm": _describe([r.fm for r in ok]),
                "nmi": _describe([r.nmi for r in ok]),
            }
        return out


def _describe(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {}
    q = np.quantile(v, [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0])
    return {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "min": q[0], "q05": q[1], "q25": q[2], "median": q[3], "q75": q[4],
            "q95": q[5], "max": q[6]}


def run_bootstrap(config: BootstrapConfig, data: Dataset, priors: Priors,
                  n_clusters: int, base_eta, sens: SensitivityMatrix | None = None,
                  indices=None) -> BootstrapRun:
    """Run ``config.n_boot`` replicates for every mode in ``config.modes``.

    Results are returned in ``(replicate, mode)`` order. With
    ``config.workers > 1`` replicates are distributed over spawned worker
    processes; each worker compiles the objective once before timing
    anything.
    """
    if "linear" in config.modes and sens is None:
        raise ValueError("linear mode requested without a sensitivity matrix")
    base_eta = np.asarray(base_eta, dtype=float)
    ctx = _Context(data, priors, n_clusters, base_eta,
                   None if sens is None else np.asarray(sens.S), config)
    indices = list(range(config.n_boot)) if indices is None else list(indices)

    if config.workers == 1:
        state = _prepare(ctx)
        batches = [_replicate_all_modes(i, state) for i in indices]
        base_zeta = state["base_zeta"]
    else:
        mp = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=config.workers, mp_context=mp,
                                 initializer=_init_worker, initargs=(ctx,)) as pool:
            batches = list(pool.map(_replicate_all_modes, indices))
        base_zeta = cluster_probs(base_eta, data, priors)

    replicates = [r for batch in batches for r in batch]
    n_bad = sum(not r.converged for r in replicates)
    if n_bad:
        logger.warning("%d replicate estimates did not converge and are excluded "
                       "from summaries", n_bad)
    return BootstrapRun(replicates=replicates, base_zeta=base_zeta,
                        sensitivity_seconds=getattr(sens, "seconds", float("nan")))
