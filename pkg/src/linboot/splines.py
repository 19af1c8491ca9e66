"""B-spline design matrices for time-course observations.

The basis is clamped (boundary knots repeated ``degree + 1`` times) with
interior knots placed at empirical quantiles of the distinct observation
times, so unevenly spaced designs get more knots where observations are
dense.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, InsufficientSupportError


@dataclass(frozen=True)
class TimeGrid:
    """Observation times, one entry per observation column.

    Replicated measurements at a time point appear as repeated entries.
    """

    obs_times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.obs_times, dtype=float)
        if t.ndim != 1 or t.size == 0:
            raise DataError("obs_times must be a non-empty 1-d array")
        if not np.all(np.isfinite(t)):
            raise DataError("obs_times contains non-finite values")
        if np.any(np.diff(t) < 0):
            raise DataError("obs_times must be sorted non-decreasing")
        t.setflags(write=False)
        object.__setattr__(self, "obs_times", t)

    @property
    def n_obs(self) -> int:
        return self.obs_times.size

    @property
    def distinct(self) -> np.ndarray:
        return np.unique(self.obs_times)

    @property
    def span(self) -> tuple[float, float]:
        return float(self.obs_times[0]), float(self.obs_times[-1])


@dataclass(frozen=True)
class BasisMatrix:
    X: np.ndarray
    knots: np.ndarray
    degree: int

    @property
    def df(self) -> int:
        return self.X.shape[1]


def build_knots(degree: int, df: int, grid: TimeGrid) -> np.ndarray:
    """Clamped knot vector of length ``df + degree + 1``.

    Interior knots sit at the quantiles ``j / (n_interior + 1)`` of the
    distinct observation times (linear interpolation between order
    statistics).

    Raises
    ------
    InsufficientSupportError
        If the grid has fewer than ``df`` distinct times, fewer than
        ``degree + 1`` observations, or a single distinct time.
    """
    if degree < 0:
        raise ValueError(f"degree must be non-negative, got {degree}")
    if df <= degree:
        raise ValueError(f"df ({df}) must exceed degree ({degree})")
    distinct = grid.distinct
    if distinct.size < df or grid.n_obs < degree + 1:
        raise InsufficientSupportError(
            f"{distinct.size} distinct times cannot support a degree-{degree} "
            f"basis with {df} degrees of freedom (need at least {df})"
        )
    lo, hi = grid.span
    if not lo < hi:
        raise InsufficientSupportError("observation times span an empty interval")
    n_interior = df - degree - 1
    levels = np.arange(1, n_interior + 1) / (n_interior + 1)
    interior = np.quantile(distinct, levels) if n_interior else np.empty(0)
    return np.concatenate(
        [np.full(degree + 1, lo), interior, np.full(degree + 1, hi)]
    )


def _validate_knots(knots, degree):
    knots = np.asarray(knots, dtype=float)
    if knots.ndim != 1 or knots.size < degree + 2:
        raise ValueError("knot vector too short for the requested degree")
    if np.any(np.diff(knots) < 0):
        raise ValueError("knots must be non-decreasing")
    if not knots[0] < knots[-1]:
        raise ValueError("knot vector spans an empty interval")
    return knots


def evaluate_basis(knots, degree: int, x) -> np.ndarray:
    """Cox-de Boor evaluation of all B-splines at points ``x``.

    Intervals are half-open ``[t_i, t_{i+1})`` except the last non-empty
    one, which is closed so that the right boundary is covered.
    """
    knots = _validate_knots(knots, degree)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lo, hi = knots[degree], knots[-degree - 1]
    outside = (x < lo) | (x > hi) | ~np.isfinite(x)
    if np.any(outside):
        raise DataError(
            f"evaluation points {x[outside][:5].tolist()} outside knot span [{lo}, {hi}]"
        )

    n_intervals = knots.size - 1
    B = ((knots[:-1] <= x[:, None]) & (x[:, None] < knots[1:])).astype(float)
    last = np.flatnonzero(knots[:-1] < knots[1:])[-1]
    B[x == knots[last + 1], last] = 1.0

    for p in range(1, degree + 1):
        n_funcs = n_intervals - p
        left_den = knots[p : p + n_funcs] - knots[:n_funcs]
        right_den = knots[p + 1 : p + 1 + n_funcs] - knots[1 : 1 + n_funcs]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (x[:, None] - knots[:n_funcs]) / left_den, 0.0)
            right = np.where(
                right_den > 0, (knots[p + 1 : p + 1 + n_funcs] - x[:, None]) / right_den, 0.0
            )
        B = left * B[:, :n_funcs] + right * B[:, 1 : n_funcs + 1]
    return B


def basis_matrix(knots, degree: int, grid: TimeGrid) -> BasisMatrix:
    knots = _validate_knots(knots, degree)
    X = evaluate_basis(knots, degree, grid.obs_times)
    X.setflags(write=False)
    knots.setflags(write=False)
    return BasisMatrix(X=X, knots=knots, degree=degree)


def make_basis(grid: TimeGrid, degree: int = 3, df: int = 7) -> BasisMatrix:
    return basis_matrix(build_knots(degree, df, grid), degree, grid)


def ls_fit(basis: BasisMatrix, y) -> tuple[np.ndarray, float]:
    """Least-squares spline coefficients and additive offset for one gene.

    The offset enters as an appended intercept column. Because a clamped
    B-spline basis sums to one in every row, the intercept is always in
    the span of ``X``; the augmented system therefore has a one-dimensional
    null space along ``(1, ..., 1, -1)`` and the minimum-norm solution is
    returned. Fitted values are unaffected by this choice.

    Returns
    -------
    coef : ndarray of shape (df,)
    offset : float
    """
    X = basis.X
    y = np.asarray(y, dtype=float)
    n_obs, df = X.shape
    if y.shape != (n_obs,):
        raise DataError(f"expected {n_obs} observations, got shape {y.shape}")
    if n_obs < df + 1:
        raise DataError(f"need at least df + 1 = {df + 1} observations, got {n_obs}")
    rank_x = np.linalg.matrix_rank(X)
    if rank_x < df:
        raise DataError(
            f"spline design is rank deficient: rank {rank_x} < df {df} "
            "(observation times do not support every basis function)"
        )
    A = np.column_stack([X, np.ones(n_obs)])
    sol, *_ = np.linalg.lstsq(A, y, rcond=None)
    return sol[:df], float(sol[df])
