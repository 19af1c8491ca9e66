"""Truncated DP mixture of B-spline regressions and its variational objective.

Generative model (per gene ``g``, cluster ``k``)::

    nu_k ~ Beta(1, alpha),  k < K;   nu_K = 1
    pi_k = nu_k * prod_{j<k} (1 - nu_j)
    beta_k ~ N(beta_mean, beta_var I)
    tau ~ Gamma(shape=tau_shape, scale=tau_scale)
    z_g ~ Categorical(pi)
    b_g ~ N(b_mean, b_var)
    y_g | z_g = k ~ N(X beta_k + b_g 1, I / tau)

Variational family: ``q(nu_k) = Beta(a_k, b_k)``, point masses on ``beta``
and ``tau``, ``q(z_g) = Categorical(zeta_g)`` and ``q(b_g | z_gk = 1) =
N(m_gk, v_gk)``.

Objective convention
--------------------
``kl`` below is ``E_q[log q] - E_q[log p(Y, theta | W)]`` with the point-mass
entropies set to zero. It differs from the true ``KL(q || p(theta | Y, W))``
by ``-log p(Y | W)`` plus the dropped point-mass entropies, neither of which
depends on the variational parameters. Every normalising constant of the
priors and the likelihood is kept, so values are comparable across calls and
across datasets.

The weight ``w_g`` multiplies the whole contribution of gene ``g`` (its
likelihood, the priors of its local latent variables and the entropy of its
local factors). With this convention an integer weight is exactly equivalent
to repeating the gene, and the optimal local factors do not depend on
``w_g``.

All objective code is written against ``jax.numpy`` so that the same path
runs on concrete arrays and under automatic differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import digamma, gammaln, logsumexp

from .errors import DataError, NumericalError
from .splines import BasisMatrix, TimeGrid, make_basis

LOG_2PI = float(np.log(2 * np.pi))


@dataclass(frozen=True)
class Priors:
    alpha: float = 2.0
    beta_mean: float = 0.38
    beta_var: float = 10.0
    b_mean: float = 0.0
    b_var: float = 10.0
    tau_shape: float = 0.1
    tau_scale: float = 10.0

    def __post_init__(self):
        for name in ("alpha", "beta_var", "b_var", "tau_shape", "tau_scale"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"prior {name} must be positive, got {value}")
        for name in ("beta_mean", "b_mean"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"prior {name} must be finite")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.alpha, self.beta_mean, self.beta_var, self.b_mean,
             self.b_var, self.tau_shape, self.tau_scale]
        )

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class GlobalParams:
    """Global variational parameters, stored on the unconstrained scale.

    Storing logs rather than the positive parameters themselves keeps
    :func:`pack` and :func:`unpack` exact inverses of one another.
    """

    log_stick_a: np.ndarray
    log_stick_b: np.ndarray
    beta: np.ndarray
    log_tau: float

    @classmethod
    def from_natural(cls, stick_a, stick_b, beta, tau) -> "GlobalParams":
        stick_a = np.asarray(stick_a, dtype=float)
        stick_b = np.asarray(stick_b, dtype=float)
        if np.any(stick_a <= 0) or np.any(stick_b <= 0) or not tau > 0:
            raise ValueError("stick parameters and tau must be strictly positive")
        return cls(np.log(stick_a), np.log(stick_b),
                   np.asarray(beta, dtype=float), float(np.log(tau)))

    @property
    def stick_a(self):
        return np.exp(self.log_stick_a)

    @property
    def stick_b(self):
        return np.exp(self.log_stick_b)

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau))

    @property
    def sigma2(self) -> float:
        return 1.0 / self.tau

    @property
    def n_clusters(self) -> int:
        return self.beta.shape[0]


@dataclass(frozen=True)
class LocalParams:
    zeta: np.ndarray
    b_mean: np.ndarray
    b_var: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """Expression matrix (genes x observation columns) with its spline basis."""

    y: np.ndarray
    grid: TimeGrid
    basis: BasisMatrix
    gene_ids: tuple = ()
    stats: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        if y.ndim != 2:
            raise DataError("y must be a 2-d (genes x observations) array")
        if not np.all(np.isfinite(y)):
            raise DataError("expression matrix contains missing or non-finite values")
        if y.shape[1] != self.grid.n_obs or self.basis.X.shape[0] != self.grid.n_obs:
            raise DataError("observation columns do not align with the time grid/basis")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        ids = tuple(self.gene_ids) if len(self.gene_ids) else tuple(
            f"g{i}" for i in range(y.shape[0]))
        if len(ids) != y.shape[0]:
            raise DataError("gene_ids length does not match number of genes")
        object.__setattr__(self, "gene_ids", ids)
        object.__setattr__(self, "stats", _sufficient_stats(y, self.basis.X))

    @classmethod
    def from_arrays(cls, y, obs_times, degree=3, df=7, gene_ids=()) -> "Dataset":
        grid = TimeGrid(np.asarray(obs_times, dtype=float))
        return cls(y=y, grid=grid, basis=make_basis(grid, degree, df), gene_ids=gene_ids)

    @property
    def n_genes(self) -> int:
        return self.y.shape[0]

    @property
    def n_obs(self) -> int:
        return self.y.shape[1]

    @property
    def df(self) -> int:
        return self.basis.df

    @property
    def X(self) -> np.ndarray:
        return self.basis.X

    def subset(self, index) -> "Dataset":
        """Dataset restricted to (or repeating) the genes in ``index``."""
        index = np.asarray(index, dtype=int)
        return Dataset(y=self.y[index], grid=self.grid, basis=self.basis,
                       gene_ids=tuple(self.gene_ids[i] for i in index))


def _sufficient_stats(y, X):
    # Everything the objective needs is a function of these; the
    # (genes x clusters x observations) residual tensor is never formed.
    return {
        "yX": y @ X,
        "ysum": y.sum(axis=1),
        "yss": (y ** 2).sum(axis=1),
        "XtX": X.T @ X,
        "Xsum": X.sum(axis=0),
        "n_obs": float(y.shape[1]),
    }


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------

def free_dim(n_clusters: int, df: int) -> int:
    return 2 * (n_clusters - 1) + n_clusters * df + 1


def n_clusters_from_dim(dim: int, df: int) -> int:
    n_clusters, rem = divmod(dim + 1, df + 2)
    if rem or n_clusters < 1:
        raise ValueError(f"free vector of length {dim} does not match df={df}")
    return n_clusters


def pack(params: GlobalParams) -> np.ndarray:
    eta = np.concatenate([
        np.asarray(params.log_stick_a, dtype=float).ravel(),
        np.asarray(params.log_stick_b, dtype=float).ravel(),
        np.asarray(params.beta, dtype=float).ravel(),
        [float(params.log_tau)],
    ])
    if not np.all(np.isfinite(eta)):
        raise NumericalError("global parameters contain non-finite entries")
    return eta


def _split(eta, n_clusters, df):
    m = n_clusters - 1
    return (eta[:m], eta[m:2 * m],
            eta[2 * m:2 * m + n_clusters * df].reshape(n_clusters, df),
            eta[-1])


def unpack(eta, df: int) -> GlobalParams:
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise NumericalError("free vector contains non-finite entries")
    n_clusters = n_clusters_from_dim(eta.size, df)
    log_a, log_b, beta, log_tau = _split(eta, n_clusters, df)
    return GlobalParams(log_a.copy(), log_b.copy(), beta.copy(), float(log_tau))


# ---------------------------------------------------------------------------
# Generic objective pieces (jax.numpy; traceable)
# ---------------------------------------------------------------------------

def stick_probs(nu):
    """Stick-breaking weights ``pi_k = nu_k prod_{j<k}(1 - nu_j)`` with nu_K = 1."""
    nu = jnp.concatenate([jnp.asarray(nu, dtype=float), jnp.ones(1)])
    remaining = jnp.concatenate([jnp.ones(1), jnp.cumprod(1.0 - nu[:-1])])
    return nu * remaining


def expected_log_pi(log_a, log_b):
    """``E_q[log pi_k]`` under Beta sticks, with the last stick fixed at one."""
    a, b = jnp.exp(log_a), jnp.exp(log_b)
    dig_ab = digamma(a + b)
    e_log_nu = digamma(a) - dig_ab
    e_log_1m_nu = digamma(b) - dig_ab
    before = jnp.concatenate([jnp.zeros(1), jnp.cumsum(e_log_1m_nu)])
    return jnp.concatenate([e_log_nu, jnp.zeros(1)]) + before


def _beta_kl(a, b, a0, b0):
    """KL(Beta(a, b) || Beta(a0, b0))."""
    log_beta_fn = lambda p, q: gammaln(p) + gammaln(q) - gammaln(p + q)  # noqa: E731
    return (log_beta_fn(a0, b0) - log_beta_fn(a, b) + (a - a0) * digamma(a)
            + (b - b0) * digamma(b) + (a0 - a + b0 - b) * digamma(a + b))


def _residual_moments(beta, stats, pv):
    """Sum and sum of squares of ``y_g - b_mean - X beta_k`` for every (g, k)."""
    b0 = pv[3]
    n = stats["n_obs"]
    fit_sum = beta @ stats["Xsum"]                                   # (K,)
    fit_ss = jnp.einsum("ki,ij,kj->k", beta, stats["XtX"], beta)      # (K,)
    cross = stats["yX"] @ beta.T - b0 * fit_sum[None, :]              # (G, K)
    c_sum = stats["ysum"] - n * b0                                   # (G,)
    c_ss = stats["yss"] - 2 * b0 * stats["ysum"] + n * b0 ** 2        # (G,)
    r_sum = c_sum[:, None] - fit_sum[None, :]
    r_ss = c_ss[:, None] - 2 * cross + fit_ss[None, :]
    return r_sum, r_ss


def local_optimum(eta, stats, pv, n_clusters):
    """Closed-form optimal local factors at fixed global parameters.

    Returns ``(zeta, log_zeta, b_mean, b_var)``. For each (g, k) the offset
    update is the conjugate normal posterior of ``b_g`` given cluster ``k``;
    ``zeta`` is the softmax of ``E[log pi_k]`` plus the log marginal
    likelihood of ``y_g`` under cluster ``k`` with ``b_g`` integrated out.
    """
    df = stats["XtX"].shape[0]
    log_a, log_b, beta, log_tau = _split(eta, n_clusters, df)
    tau = jnp.exp(log_tau)
    n = stats["n_obs"]
    b0, v0 = pv[3], pv[4]

    r_sum, r_ss = _residual_moments(beta, stats, pv)
    shrink = 1.0 + n * tau * v0
    post_var = v0 / shrink
    post_mean = b0 + tau * post_var * r_sum
    log_marg = (-0.5 * n * LOG_2PI + 0.5 * n * log_tau - 0.5 * jnp.log(shrink)
                - 0.5 * tau * (r_ss - tau * v0 * r_sum ** 2 / shrink))
    logits = expected_log_pi(log_a, log_b)[None, :] + log_marg
    log_zeta = logits - logsumexp(logits, axis=1, keepdims=True)
    zeta = jnp.exp(log_zeta)
    b_var = jnp.broadcast_to(post_var, zeta.shape)
    return zeta, log_zeta, post_mean, b_var


def global_terms(eta, pv, n_clusters, df):
    """Prior (and Beta entropy) terms that do not involve any gene."""
    log_a, log_b, beta, log_tau = _split(eta, n_clusters, df)
    alpha, beta_mean, beta_var = pv[0], pv[1], pv[2]
    shape, scale = pv[5], pv[6]
    sticks = jnp.sum(_beta_kl(jnp.exp(log_a), jnp.exp(log_b), 1.0, alpha))
    coef = 0.5 * beta.size * (LOG_2PI + jnp.log(beta_var)) + \
        jnp.sum((beta - beta_mean) ** 2) / (2 * beta_var)
    tau = jnp.exp(log_tau)
    prec = gammaln(shape) + shape * jnp.log(scale) - (shape - 1) * log_tau + tau / scale
    return sticks + coef + prec


def gene_terms(eta, local, stats, pv, n_clusters):
    """Per-gene contribution to the objective for arbitrary local factors.

    ``local = (zeta, log_zeta, b_mean, b_var)``. Returns a vector of length
    ``n_genes``; the objective weights these by ``w``.
    """
    zeta, log_zeta, m, v = local
    df = stats["XtX"].shape[0]
    log_a, log_b, beta, log_tau = _split(eta, n_clusters, df)
    tau = jnp.exp(log_tau)
    n = stats["n_obs"]
    b0, v0 = pv[3], pv[4]
    r_sum, r_ss = _residual_moments(beta, stats, pv)
    d = m - b0
    sq = r_ss - 2 * d * r_sum + n * d ** 2            # ||y - X beta_k - m||^2
    neg_loglik = 0.5 * n * (LOG_2PI - log_tau) + 0.5 * tau * (sq + n * v)
    neg_logprior_b = 0.5 * (LOG_2PI + jnp.log(v0)) + (d ** 2 + v) / (2 * v0)
    neg_entropy_b = -0.5 * (LOG_2PI + 1.0 + jnp.log(v))
    e_log_pi = expected_log_pi(log_a, log_b)[None, :]
    per = neg_loglik + neg_logprior_b + neg_entropy_b - e_log_pi + log_zeta
    return jnp.sum(zeta * per, axis=1)


def full_kl(eta, local, w, stats, pv, n_clusters):
    df = stats["XtX"].shape[0]
    return global_terms(eta, pv, n_clusters, df) + \
        jnp.dot(w, gene_terms(eta, local, stats, pv, n_clusters))


def marginal_kl_fn(eta, w, stats, pv, n_clusters):
    """Objective of the global parameters alone, locals at their optimum."""
    local = local_optimum(eta, stats, pv, n_clusters)
    return full_kl(eta, local, w, stats, pv, n_clusters)


@partial(jax.jit, static_argnames=("n_clusters",))
def _marginal_kl_jit(eta, w, stats, pv, n_clusters):
    return marginal_kl_fn(eta, w, stats, pv, n_clusters)


@partial(jax.jit, static_argnames=("n_clusters",))
def _local_jit(eta, stats, pv, n_clusters):
    return local_optimum(eta, stats, pv, n_clusters)


@partial(jax.jit, static_argnames=("n_clusters",))
def _terms_jit(eta, w, stats, pv, n_clusters):
    local = local_optimum(eta, stats, pv, n_clusters)
    df = stats["XtX"].shape[0]
    return (global_terms(eta, pv, n_clusters, df),
            gene_terms(eta, local, stats, pv, n_clusters))


# ---------------------------------------------------------------------------
# Public numpy-facing API
# ---------------------------------------------------------------------------

def _check_weights(w, n_genes):
    if w is None:
        return np.ones(n_genes)
    w = np.asarray(w, dtype=float)
    if w.shape != (n_genes,):
        raise DataError(f"weight vector has shape {w.shape}, expected ({n_genes},)")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DataError("weights must be finite and non-negative")
    return w


def local_update(params: GlobalParams, data: Dataset, priors: Priors) -> LocalParams:
    """Exact coordinate minimiser of the objective over the local factors."""
    eta = pack(params)
    zeta, _, m, v = _local_jit(eta, data.stats, priors.as_array(), params.n_clusters)
    return LocalParams(np.asarray(zeta), np.asarray(m), np.asarray(v))


def cluster_probs(eta, data: Dataset, priors: Priors) -> np.ndarray:
    """Posterior cluster probabilities ``zeta`` (genes x clusters)."""
    eta = np.asarray(eta, dtype=float)
    n_clusters = n_clusters_from_dim(eta.size, data.df)
    zeta = np.asarray(_local_jit(eta, data.stats, priors.as_array(), n_clusters)[0])
    return zeta


def marginal_kl(eta, w, data: Dataset, priors: Priors) -> float:
    """Objective value at ``eta`` with weights ``w`` (``None`` means all ones).

    Raises
    ------
    NumericalError
        If any term is non-finite; the message names the offending term.
    """
    eta = np.asarray(eta, dtype=float)
    w = _check_weights(w, data.n_genes)
    n_clusters = n_clusters_from_dim(eta.size, data.df)
    value = float(_marginal_kl_jit(eta, w, data.stats, priors.as_array(), n_clusters))
    if not np.isfinite(value):
        glob, genes = _terms_jit(eta, w, data.stats, priors.as_array(), n_clusters)
        if not np.isfinite(float(glob)):
            raise NumericalError("non-finite prior/stick term in objective")
        bad = np.flatnonzero(~np.isfinite(np.asarray(genes)))
        raise NumericalError(f"non-finite likelihood term for genes {bad[:10].tolist()}")
    return value
