"""Weight sensitivity of the optimum and the linear bootstrap.

At an optimum ``eta*`` of ``KL(eta, W)`` the implicit function theorem gives

    S = d eta*(W) / dW = -H^{-1} C,   H = d2KL/deta deta,  C = d2KL/deta dW,

evaluated at ``W = 1``. The linear bootstrap replaces each refit by
``eta* + S (W - 1)`` and maps the result to cluster probabilities.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .derivatives import DerivativeBundle
from .errors import NotStrictMinimumError, NumericalError
from .model import Dataset, Priors, cluster_probs

RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class SensitivityMatrix:
    S: np.ndarray
    eta_star: np.ndarray
    hessian_factor: tuple | None = None
    residual: float = 0.0
    seconds: float = 0.0

    @property
    def n_genes(self) -> int:
        return self.S.shape[1]

    def metadata(self) -> dict:
        return {"residual": self.residual, "seconds": self.seconds}


def compute_S(bundle: DerivativeBundle, eta_star) -> SensitivityMatrix:
    """Solve ``H S = -C`` with one Cholesky factorisation.

    Raises
    ------
    NotStrictMinimumError
        If the Hessian is not positive definite.
    NumericalError
        If the solve residual exceeds the relative tolerance.
    """
    start = time.perf_counter()
    H = np.atleast_2d(np.asarray(bundle.hess, dtype=float))
    C = np.asarray(bundle.cross, dtype=float).reshape(H.shape[0], -1)
    try:
        factor = scipy.linalg.cho_factor(H, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NotStrictMinimumError(
            "Hessian is not positive definite; the base fit is unconverged or a saddle"
        ) from exc
    S = -scipy.linalg.cho_solve(factor, C)
    residual = _relative_residual(H, S, C)
    if not residual <= RESIDUAL_TOL:
        raise NumericalError(f"sensitivity solve residual {residual:.3e} exceeds "
                             f"{RESIDUAL_TOL:g} (Hessian too ill-conditioned)")
    S.setflags(write=False)
    return SensitivityMatrix(S=S, eta_star=np.array(eta_star, dtype=float),
                             hessian_factor=factor, residual=residual,
                             seconds=time.perf_counter() - start)


def _relative_residual(H, S, C):
    num = np.linalg.norm(H @ S + C)
    den = np.linalg.norm(H) * np.linalg.norm(S) + np.linalg.norm(C)
    return float(num / den) if den > 0 else float(num)


def sensitivity_for(objective, eta_star) -> SensitivityMatrix:
    """Derivatives at ``(eta*, 1)`` followed by :func:`compute_S`, timed together."""
    start = time.perf_counter()
    ones = np.ones(objective.data.n_genes) if hasattr(objective, "data") else None
    bundle = DerivativeBundle(objective.grad(eta_star, ones),
                              objective.hessian(eta_star, ones),
                              objective.cross(eta_star, ones))
    sens = compute_S(bundle, eta_star)
    return SensitivityMatrix(sens.S, sens.eta_star, sens.hessian_factor, sens.residual,
                             seconds=time.perf_counter() - start)


def eta_lin(sens: SensitivityMatrix, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (sens.n_genes,):
        raise ValueError(f"weights have shape {w.shape}, expected ({sens.n_genes},)")
    return sens.eta_star + sens.S @ (w - 1.0)


def predict_clustering(eta, data: Dataset, priors: Priors) -> np.ndarray:
    """Cluster probabilities at a (linearised) parameter.

    The local update is independent of the gene weights (see :mod:`.model`),
    so the same map serves the linear, warm and cold estimators.
    """
    return cluster_probs(eta, data, priors)


class WeightedQuadratic:
    """``KL(eta, W) = sum_g w_g |eta - y_g|^2 / 2`` with closed-form sensitivity.

    ``eta*(W)`` is the weighted mean of the rows of ``y``, so column ``g`` of
    ``S`` at ``W = 1`` is ``(y_g - mean(y)) / n``.
    """

    def __init__(self, y):
        y = np.asarray(y, dtype=float)
        self.y = y.reshape(len(y), -1)

    @property
    def n_genes(self):
        return self.y.shape[0]

    def _w(self, w):
        return np.ones(self.n_genes) if w is None else np.asarray(w, dtype=float)

    def value(self, eta, w=None):
        r = np.asarray(eta, dtype=float)[None, :] - self.y
        return float(0.5 * self._w(w) @ (r ** 2).sum(axis=1))

    def grad(self, eta, w=None):
        return self._w(w) @ (np.asarray(eta, dtype=float)[None, :] - self.y)

    def hessian(self, eta, w=None):
        return self._w(w).sum() * np.eye(self.y.shape[1])

    def cross(self, eta, w=None):
        return (np.asarray(eta, dtype=float)[None, :] - self.y).T

    def argmin(self, w=None):
        w = self._w(w)
        return w @ self.y / w.sum()

    def exact_S(self):
        return ((self.y - self.y.mean(axis=0)) / self.n_genes).T
