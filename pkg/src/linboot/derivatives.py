"""Exact derivatives of the marginal objective, plus finite-difference oracles.

Derivatives come from automatic differentiation through the composition of
the closed-form local update with the full objective, so they are exact up
to floating point. Second derivatives use forward-over-reverse mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import jax
import numpy as np

from .errors import NumericalError
from .model import (
    Dataset,
    Priors,
    _check_weights,
    _marginal_kl_jit,
    full_kl,
    local_optimum,
    marginal_kl,
    marginal_kl_fn,
    n_clusters_from_dim,
)

_grad = jax.grad(marginal_kl_fn, argnums=0)


@partial(jax.jit, static_argnames=("n_clusters",))
def _value_and_grad_jit(eta, w, stats, pv, n_clusters):
    return jax.value_and_grad(marginal_kl_fn)(eta, w, stats, pv, n_clusters)


@partial(jax.jit, static_argnames=("n_clusters",))
def _grad_jit(eta, w, stats, pv, n_clusters):
    return _grad(eta, w, stats, pv, n_clusters)


@partial(jax.jit, static_argnames=("n_clusters",))
def _hess_jit(eta, w, stats, pv, n_clusters):
    return jax.jacfwd(_grad, argnums=0)(eta, w, stats, pv, n_clusters)


@partial(jax.jit, static_argnames=("n_clusters",))
def _cross_jit(eta, w, stats, pv, n_clusters):
    return jax.jacfwd(_grad, argnums=1)(eta, w, stats, pv, n_clusters)


@partial(jax.jit, static_argnames=("n_clusters",))
def _partial_grad_jit(eta, w, stats, pv, n_clusters):
    # Gradient with the local factors held fixed at their optimum.
    local = jax.lax.stop_gradient(local_optimum(eta, stats, pv, n_clusters))
    return jax.grad(full_kl)(eta, local, w, stats, pv, n_clusters)


@dataclass(frozen=True)
class DerivativeBundle:
    grad: np.ndarray
    hess: np.ndarray
    cross: np.ndarray


def _finite(name, arr):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite entries in {name}")
    return arr


class KLObjective:
    """The weighted marginal objective bound to one dataset and prior.

    Implements the ``value / grad / hessian / cross`` protocol used by the
    optimizer and the sensitivity code.
    """

    def __init__(self, data: Dataset, priors: Priors, n_clusters: int):
        if n_clusters < 1:
            raise ValueError("n_clusters must be at least 1")
        self.data = data
        self.priors = priors
        self.n_clusters = int(n_clusters)
        self._pv = priors.as_array()
        self._stats = data.stats

    @property
    def dim(self) -> int:
        return 2 * (self.n_clusters - 1) + self.n_clusters * self.data.df + 1

    def _args(self, eta, w):
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (self.dim,):
            raise ValueError(f"eta has shape {eta.shape}, expected ({self.dim},)")
        return eta, _check_weights(w, self.data.n_genes), self._stats, self._pv, self.n_clusters

    def value(self, eta, w=None) -> float:
        return float(_marginal_kl_jit(*self._args(eta, w)))

    def value_and_grad(self, eta, w=None):
        v, g = _value_and_grad_jit(*self._args(eta, w))
        return float(v), np.asarray(g)

    def grad(self, eta, w=None) -> np.ndarray:
        return _finite("gradient", _grad_jit(*self._args(eta, w)))

    def hessian(self, eta, w=None) -> np.ndarray:
        H = _finite("Hessian", _hess_jit(*self._args(eta, w)))
        return 0.5 * (H + H.T)

    def cross(self, eta, w=None) -> np.ndarray:
        return _finite("weight cross-derivative", _cross_jit(*self._args(eta, w)))

    def partial_grad(self, eta, w=None) -> np.ndarray:
        return np.asarray(_partial_grad_jit(*self._args(eta, w)))

    def bundle(self, eta, w=None) -> DerivativeBundle:
        return DerivativeBundle(self.grad(eta, w), self.hessian(eta, w), self.cross(eta, w))

    def warm_up(self, cross: bool = False):
        """Trigger compilation so later calls can be timed fairly."""
        eta = np.zeros(self.dim)
        self.value_and_grad(eta)
        self.hessian(eta)
        if cross:
            self.cross(eta)


def _objective_for(eta, data, priors):
    return KLObjective(data, priors, n_clusters_from_dim(np.asarray(eta).size, data.df))


def kl_grad(eta, w, data: Dataset, priors: Priors) -> np.ndarray:
    marginal_kl(eta, w, data, priors)  # raises with a diagnostic if non-finite
    return _objective_for(eta, data, priors).grad(eta, w)


def kl_hessian(eta, w, data: Dataset, priors: Priors) -> np.ndarray:
    marginal_kl(eta, w, data, priors)
    return _objective_for(eta, data, priors).hessian(eta, w)


def kl_cross(eta, w, data: Dataset, priors: Priors) -> np.ndarray:
    marginal_kl(eta, w, data, priors)
    return _objective_for(eta, data, priors).cross(eta, w)


# ---------------------------------------------------------------------------
# Finite-difference oracles
# ---------------------------------------------------------------------------

def fd_gradient(f, x, step=1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        out[i] = (f(x + e) - f(x - e)) / (2 * step)
    return out


def fd_jacobian(g, x, step=1e-4) -> np.ndarray:
    """Central finite-difference Jacobian; column ``i`` is d g / d x_i."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.asarray(g(x + e)) - np.asarray(g(x - e))) / (2 * step))
    return np.column_stack(cols)
