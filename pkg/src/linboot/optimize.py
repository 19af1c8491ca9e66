"""K-means initialisation, BFGS warm-up and preconditioned trust-region Newton.

``optimize`` accepts any objective exposing ``value(eta, w)``,
``grad(eta, w)`` and ``hessian(eta, w)`` (``value_and_grad`` is used when
present), so analytic toy problems can be run through the same code.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.optimize
from sklearn.cluster import KMeans

from .errors import DataError, OptimizationFailed
from .model import Dataset, GlobalParams, Priors, _check_weights, pack
from .splines import ls_fit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    bfgs_iters: int = 300
    newton_iters: int = 500
    gtol: float = 1e-8
    precondition_refresh: int = 50
    initial_radius: float = 1.0
    max_radius: float = 1e4


@dataclass
class FitResult:
    eta_star: np.ndarray
    kl_value: float
    grad_norm: float
    bfgs_iterations: int
    newton_iterations: int
    converged: bool
    wall_time: float
    init_seed: int | None = None
    message: str = ""
    trace: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "kl_value": self.kl_value,
            "grad_norm": self.grad_norm,
            "bfgs_iterations": self.bfgs_iterations,
            "newton_iterations": self.newton_iterations,
            "converged": self.converged,
            "wall_time": self.wall_time,
            "init_seed": self.init_seed,
            "message": self.message,
        }


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------

def per_gene_fits(data: Dataset):
    """Least-squares spline coefficients, offsets and residual sums of squares."""
    coefs = np.empty((data.n_genes, data.df))
    offsets = np.empty(data.n_genes)
    for g in range(data.n_genes):
        coefs[g], offsets[g] = ls_fit(data.basis, data.y[g])
    fitted = coefs @ data.X.T + offsets[:, None]
    rss = ((data.y - fitted) ** 2).sum(axis=1)
    return coefs, offsets, rss


def kmeans_init(data: Dataset, n_clusters: int, priors: Priors, seed: int,
                weights=None) -> GlobalParams:
    """Initial global parameters from K-means on per-gene spline fits.

    Genes are clustered on their coefficient vectors with the per-gene mean
    removed, since that level is confounded with the additive offset. Each
    centroid is shifted back by the mean level of its member genes. Sticks
    start at the prior ``Beta(1, alpha)`` and ``tau`` at the inverse pooled
    residual variance.
    """
    if n_clusters < 1:
        raise ValueError("n_clusters must be at least 1")
    if n_clusters > data.n_genes:
        raise DataError(f"cannot form {n_clusters} clusters from {data.n_genes} genes")
    w = _check_weights(weights, data.n_genes)
    if not w.sum() > 0:
        raise DataError("all weights are zero")

    coefs, offsets, rss = per_gene_fits(data)
    level = coefs.mean(axis=1)
    shape = coefs - level[:, None]
    with warnings.catch_warnings():
        # Duplicate points (fewer distinct genes than clusters) are legitimate.
        warnings.simplefilter("ignore")
        km = KMeans(n_clusters=n_clusters, n_init=10, random_state=seed)
        labels = km.fit_predict(shape, sample_weight=w)
    centroids = km.cluster_centers_
    gene_level = level + offsets
    global_level = np.average(gene_level, weights=w)
    beta = np.empty_like(centroids)
    for k in range(n_clusters):
        wk = w * (labels == k)
        beta[k] = centroids[k] + (np.average(gene_level, weights=wk) if wk.sum() > 0
                                  else global_level)

    dof = max(data.n_obs - data.df - 1, 1)
    resid_var = max(np.sum(w * rss) / (w.sum() * dof), 1e-10)
    return GlobalParams(
        log_stick_a=np.zeros(n_clusters - 1),
        log_stick_b=np.full(n_clusters - 1, np.log(priors.alpha)),
        beta=beta,
        log_tau=float(-np.log(resid_var)),
    )


# ---------------------------------------------------------------------------
# Trust-region subproblem
# ---------------------------------------------------------------------------

def _trust_region_step(g, H, radius):
    """Minimise ``g.u + u.H.u / 2`` subject to ``|u| <= radius``.

    Uses a full eigendecomposition, which handles indefinite ``H`` (the step
    becomes a regularised, gradient-related direction). Returns
    ``(u, on_boundary)``.
    """
    d, Q = np.linalg.eigh(H)
    c = Q.T @ g
    scale = max(np.max(np.abs(d)), 1.0)
    if d[0] > 1e-12 * scale:
        u = -Q @ (c / d)
        if np.linalg.norm(u) <= radius:
            return u, False

    lam_lo = max(0.0, -d[0]) + 1e-12 * scale
    norm_at = lambda lam: np.linalg.norm(c / (d + lam))  # noqa: E731
    if norm_at(lam_lo) <= radius:
        # Hard case: gradient nearly orthogonal to the lowest eigenvector.
        u = -Q @ (c / (d + lam_lo))
        slack = radius ** 2 - u @ u
        if slack > 0:
            u = u + np.sqrt(slack) * Q[:, 0]
        return u, True
    lam_hi = np.max(np.abs(d)) + np.linalg.norm(c) / radius + lam_lo
    lam = scipy.optimize.brentq(lambda lam: norm_at(lam) - radius, lam_lo, lam_hi,
                                xtol=1e-14, rtol=1e-12)
    return -Q @ (c / (d + lam)), True


def _initial_radius(g, H, default):
    # Try the full Newton step first when the model is convex.
    d, Q = np.linalg.eigh(H)
    if d[0] <= 1e-12 * max(np.max(np.abs(d)), 1.0):
        return default
    return max(default, float(np.linalg.norm((Q.T @ g) / d)))


def _preconditioner(H):
    """Map ``M`` with ``M.T H M ~ I`` built from a (possibly indefinite) Hessian."""
    d, Q = np.linalg.eigh(0.5 * (H + H.T))
    floor = 1e-8 * max(np.max(np.abs(d)), 1e-300)
    d = np.maximum(np.abs(d), floor)
    return Q / np.sqrt(d)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def _value_and_grad(objective, eta, w):
    if hasattr(objective, "value_and_grad"):
        return objective.value_and_grad(eta, w)
    return objective.value(eta, w), objective.grad(eta, w)


def optimize(objective, eta0, weights=None, schedule: Schedule | None = None,
             init_seed: int | None = None) -> FitResult:
    """Minimise ``objective`` from ``eta0``: BFGS warm-up, then Newton trust region.

    Stage 2 works in coordinates preconditioned by the Hessian at the end of
    stage 1 and stops when ``max|grad| <= schedule.gtol``. Steps are only
    accepted when the objective does not increase; once the predicted
    decrease falls below the rounding level of the objective, acceptance is
    judged on the gradient norm instead.
    """
    schedule = schedule or Schedule()
    start = time.perf_counter()
    eta = np.array(eta0, dtype=float)
    f, g = _value_and_grad(objective, eta, weights)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise OptimizationFailed("objective is not finite at the starting point")
    trace = [f]
    bfgs_iters = 0

    # Stage 1: BFGS.
    if schedule.bfgs_iters > 0 and np.max(np.abs(g)) > schedule.gtol:
        best = {"f": f, "x": eta.copy()}

        def fun(x):
            try:
                v, gr = _value_and_grad(objective, x, weights)
            except ArithmeticError:
                return np.inf, np.zeros_like(x)
            if not np.isfinite(v) or not np.all(np.isfinite(gr)):
                return np.inf, np.zeros_like(x)
            if v < best["f"]:
                best["f"], best["x"] = v, x.copy()
            return v, gr

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = scipy.optimize.minimize(
                fun, eta, jac=True, method="BFGS",
                options={"maxiter": schedule.bfgs_iters, "gtol": schedule.gtol,
                         "norm": np.inf},
            )
        bfgs_iters = int(res.nit)
        cand = res.x if np.isfinite(res.fun) and res.fun <= best["f"] else best["x"]
        if not np.array_equal(cand, eta):
            eta = cand
            f, g = _value_and_grad(objective, eta, weights)
            trace.append(f)

    # Stage 2: Hessian-preconditioned Newton trust region.
    newton_iters = 0
    message = ""
    gnorm = float(np.max(np.abs(g)))
    if gnorm > schedule.gtol and schedule.newton_iters > 0:
        H = objective.hessian(eta, weights)
        M = _preconditioner(H)
        radius = None
        checkpoint = gnorm
        eps_f = 64 * np.finfo(float).eps
        while newton_iters < schedule.newton_iters:
            if not np.all(np.isfinite(H)):
                message = "non-finite Hessian"
                break
            gs = M.T @ g
            Hs = M.T @ H @ M
            Hs = 0.5 * (Hs + Hs.T)
            if radius is None:
                radius = _initial_radius(gs, Hs, schedule.initial_radius)
            u, on_boundary = _trust_region_step(gs, Hs, radius)
            pred = -(gs @ u + 0.5 * u @ Hs @ u)
            step = M @ u
            newton_iters += 1
            try:
                f_new, g_new = _value_and_grad(objective, eta + step, weights)
            except ArithmeticError:
                f_new, g_new = np.inf, None
            noise = eps_f * max(abs(f), 1.0)
            accept = False
            rho = -np.inf
            if np.isfinite(f_new) and np.all(np.isfinite(g_new)):
                actual = f - f_new
                if pred > noise:
                    rho = actual / pred
                    accept = rho > 1e-4
                else:
                    accept = actual >= -noise and np.max(np.abs(g_new)) < gnorm
                    rho = 1.0 if accept else -np.inf
            if accept:
                eta = eta + step
                f, g = f_new, g_new
                gnorm = float(np.max(np.abs(g)))
                trace.append(f)
                if gnorm <= schedule.gtol:
                    break
                H = objective.hessian(eta, weights)
            if rho < 0.25:
                radius *= 0.25
            elif rho > 0.75 and on_boundary:
                radius = min(2 * radius, schedule.max_radius)
            if radius < 1e-14:
                message = "trust region collapsed"
                break
            if newton_iters % schedule.precondition_refresh == 0:
                if gnorm > 0.5 * checkpoint:
                    M = _preconditioner(H)
                    radius = None
                checkpoint = gnorm
        else:
            message = "Newton iteration limit reached"

    converged = bool(gnorm <= schedule.gtol)
    if converged:
        message = "converged"
    return FitResult(
        eta_star=eta, kl_value=float(f), grad_norm=gnorm,
        bfgs_iterations=bfgs_iters, newton_iterations=newton_iters,
        converged=converged, wall_time=time.perf_counter() - start,
        init_seed=init_seed, message=message or "not converged", trace=trace,
    )


def restart_seeds(master_seed: int, n: int) -> list[int]:
    """Independent integer seeds derived from ``(master_seed, i)``."""
    return [int(np.random.SeedSequence([master_seed, 0, i]).generate_state(1)[0])
            for i in range(n)]


def fit_from_seed(objective, seed, weights=None, schedule=None) -> FitResult:
    params = kmeans_init(objective.data, objective.n_clusters, objective.priors,
                         seed, weights)
    try:
        return optimize(objective, pack(params), weights, schedule, init_seed=seed)
    except OptimizationFailed as exc:
        return FitResult(pack(params), np.inf, np.inf, 0, 0, False, 0.0, seed, str(exc))


def multi_restart(objective, weights=None, n_restarts: int = 200, master_seed: int = 0,
                  schedule: Schedule | None = None, seeds=None, pool=None) -> FitResult:
    """Best converged fit over ``n_restarts`` K-means initialisations.

    Results are ranked by ``(kl_value, init_seed)`` so the choice does not
    depend on the order restarts finish. ``pool`` may be any object with an
    ordered ``map`` (e.g. an executor) to run restarts concurrently.

    Raises
    ------
    OptimizationFailed
        If no restart converges; ``diagnostics`` lists every restart.
    """
    if n_restarts < 1:
        raise ValueError("n_restarts must be at least 1")
    seeds = list(seeds) if seeds is not None else restart_seeds(master_seed, n_restarts)
    if pool is None:
        results = [fit_from_seed(objective, s, weights, schedule) for s in seeds]
    else:
        results = list(pool.map(_restart_task, [(objective, s, weights, schedule)
                                                for s in seeds]))
    ok = [r for r in results if r.converged]
    if not ok:
        raise OptimizationFailed(
            f"all {len(results)} restarts failed to converge",
            diagnostics=[r.to_dict() for r in results],
        )
    best = min(ok, key=lambda r: (r.kl_value, r.init_seed))
    logger.info("best of %d restarts: kl=%.6f (seed %s, %d converged)",
                len(results), best.kl_value, best.init_seed, len(ok))
    return replace(best, wall_time=sum(r.wall_time for r in results))


def _restart_task(args):
    objective, seed, weights, schedule = args
    return fit_from_seed(objective, seed, weights, schedule)
