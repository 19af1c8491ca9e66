import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linboot.errors import DataError, InsufficientSupportError
from linboot.splines import (
    BasisMatrix,
    TimeGrid,
    basis_matrix,
    build_knots,
    evaluate_basis,
    ls_fit,
    make_basis,
)


def recursive_bspline(knots, i, p, x):
    """Textbook Cox-de Boor recursion for a single basis function."""
    if p == 0:
        if knots[i] <= x < knots[i + 1]:
            return 1.0
        # close the last non-degenerate interval
        last = max(j for j in range(len(knots) - 1) if knots[j] < knots[j + 1])
        return 1.0 if (i == last and x == knots[i + 1]) else 0.0
    out = 0.0
    if knots[i + p] > knots[i]:
        out += (x - knots[i]) / (knots[i + p] - knots[i]) * recursive_bspline(knots, i, p - 1, x)
    if knots[i + p + 1] > knots[i + 1]:
        out += ((knots[i + p + 1] - x) / (knots[i + p + 1] - knots[i + 1])
                * recursive_bspline(knots, i + 1, p - 1, x))
    return out


def uneven_grid(n=14):
    return TimeGrid(np.round(np.geomspace(1, 57, n) - 1, 6))


class TestTimeGrid:
    def test_properties(self):
        g = TimeGrid(np.array([0.0, 0.0, 1.0, 2.0]))
        assert g.n_obs == 4
        assert g.distinct.tolist() == [0.0, 1.0, 2.0]
        assert g.span == (0.0, 2.0)

    @pytest.mark.parametrize("times", [[], [1.0, 0.0], [0.0, np.nan]])
    def test_rejects_invalid(self, times):
        with pytest.raises(DataError):
            TimeGrid(np.array(times, dtype=float))


class TestBuildKnots:
    def test_reference_sizes(self):
        knots = build_knots(3, 7, uneven_grid())
        assert knots.size == 11
        assert np.all(knots[:4] == 0.0) and np.all(knots[-4:] == 56.0)
        assert np.all(np.diff(knots) >= 0)

    def test_constant_basis(self):
        knots = build_knots(0, 1, TimeGrid(np.array([2.0, 3.0, 7.0])))
        assert knots.tolist() == [2.0, 7.0]

    def test_quantile_interior(self):
        # df=6, degree=3 gives two interior knots at the 1/3 and 2/3 quantiles
        t = np.linspace(0, 1, 10)
        knots = build_knots(3, 6, TimeGrid(t))
        np.testing.assert_allclose(knots[4:6], np.quantile(t, [1 / 3, 2 / 3]), atol=1e-15)
        np.testing.assert_allclose(knots[4:6], [1 / 3, 2 / 3], atol=1e-12)

    def test_df5_single_interior_knot(self):
        knots = build_knots(3, 5, TimeGrid(np.linspace(0, 1, 10)))
        assert knots.size == 9
        np.testing.assert_allclose(knots[4], 0.5)

    def test_insufficient_support(self):
        grid = TimeGrid(np.repeat([0.0, 1.0, 2.0], 4))
        with pytest.raises(InsufficientSupportError):
            build_knots(3, 7, grid)

    def test_single_time_rejected(self):
        with pytest.raises(InsufficientSupportError):
            build_knots(0, 1, TimeGrid(np.zeros(5)))

    def test_df_must_exceed_degree(self):
        with pytest.raises(ValueError):
            build_knots(3, 3, uneven_grid())


class TestBasisMatrix:
    def test_indicator_degree0(self):
        X = evaluate_basis(np.array([0.0, 0.5, 1.0]), 0, [0.25, 0.75, 1.0])
        np.testing.assert_array_equal(X, [[1, 0], [0, 1], [0, 1]])

    def test_reference_dimensions(self):
        basis = make_basis(uneven_grid(), 3, 7)
        assert isinstance(basis, BasisMatrix)
        assert basis.X.shape == (14, 7) and basis.df == 7
        np.testing.assert_allclose(basis.X.sum(axis=1), 1.0, atol=1e-12)

    def test_matches_recursive_oracle(self):
        knots = np.array([0, 0, 0, 1, 2, 3, 4, 4, 4], dtype=float)
        x = np.array([0.0, 0.5, 1.5, 2.5, 3.5, 4.0, 1.0, 2.0])
        X = evaluate_basis(knots, 2, x)
        expected = np.array([[recursive_bspline(knots, i, 2, xi) for i in range(6)]
                             for xi in x])
        np.testing.assert_allclose(X, expected, atol=1e-14)

    def test_matches_recursive_oracle_cubic_quantile_knots(self):
        grid = uneven_grid()
        basis = make_basis(grid, 3, 7)
        expected = np.array([[recursive_bspline(basis.knots, i, 3, t) for i in range(7)]
                             for t in grid.obs_times])
        np.testing.assert_allclose(basis.X, expected, atol=1e-14)

    def test_outside_span(self):
        with pytest.raises(DataError):
            evaluate_basis(np.array([0.0, 0.0, 1.0, 1.0]), 1, [1.5])

    def test_right_boundary_included(self):
        basis = basis_matrix(np.array([0, 0, 0, 0, 1, 1, 1, 1.0]), 3,
                             TimeGrid(np.array([0.0, 0.5, 1.0])))
        np.testing.assert_allclose(basis.X[-1], [0, 0, 0, 1])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 4), st.integers(1, 5),
           st.lists(st.floats(0, 100, allow_nan=False), min_size=12, max_size=30))
    def test_partition_of_unity_and_nonnegativity(self, degree, extra, times):
        df = degree + extra
        t = np.sort(np.asarray(times))
        if np.unique(t).size < max(df, 2):
            return
        basis = make_basis(TimeGrid(t), degree, df)
        assert np.all(basis.X >= 0) and np.all(basis.X <= 1 + 1e-15)
        np.testing.assert_allclose(basis.X.sum(axis=1), 1.0, atol=1e-12)

    def test_degree0_is_interval_indicator(self):
        grid = TimeGrid(np.linspace(0, 10, 21))
        basis = make_basis(grid, 0, 4)
        k = basis.knots
        idx = np.clip(np.searchsorted(k, grid.obs_times, side="right") - 1, 0, 3)
        np.testing.assert_array_equal(basis.X, np.eye(4)[idx])


class TestLsFit:
    def setup_method(self):
        self.basis = make_basis(uneven_grid(), 3, 7)

    def test_noiseless_recovery(self):
        rng = np.random.default_rng(0)
        c = rng.standard_normal(7)
        # the intercept is confounded with the coefficient mean, so compare
        # the identifiable fitted curve and the coefficient differences
        y = self.basis.X @ c + 2.5
        coef, offset = ls_fit(self.basis, y)
        np.testing.assert_allclose(self.basis.X @ coef + offset, y, atol=1e-10)
        np.testing.assert_allclose(np.diff(coef), np.diff(c), atol=1e-10)
        np.testing.assert_allclose(coef + offset, c + 2.5, atol=1e-10)

    def test_constant_reproduction(self):
        coef, offset = ls_fit(self.basis, np.full(14, 3.7))
        np.testing.assert_allclose(self.basis.X @ coef + offset, 3.7, atol=1e-12)

    def test_residual_matches_normal_equations(self):
        rng = np.random.default_rng(1)
        y = rng.standard_normal(14)
        coef, offset = ls_fit(self.basis, y)
        # partition of unity lets X alone span the intercept
        X = self.basis.X
        beta = np.linalg.solve(X.T @ X, X.T @ y)
        ours = np.linalg.norm(y - X @ coef - offset)
        assert abs(ours - np.linalg.norm(y - X @ beta)) < 1e-8

    def test_local_optimality(self):
        rng = np.random.default_rng(2)
        y = rng.standard_normal(14)
        coef, offset = ls_fit(self.basis, y)
        best = np.sum((y - self.basis.X @ coef - offset) ** 2)
        for _ in range(100):
            scale = 10 ** rng.uniform(-4, 0)
            dc = scale * rng.standard_normal(7)
            db = scale * rng.standard_normal()
            trial = np.sum((y - self.basis.X @ (coef + dc) - offset - db) ** 2)
            assert trial >= best - 1e-12

    def test_too_few_observations(self):
        grid = TimeGrid(np.linspace(0, 1, 7))
        basis = make_basis(grid, 3, 7)
        with pytest.raises(DataError, match="df \\+ 1"):
            ls_fit(basis, np.zeros(7))

    def test_rank_deficient_design(self):
        X = np.zeros((10, 3))
        X[:, 0] = 1.0
        basis = BasisMatrix(X=X, knots=np.zeros(5), degree=1)
        with pytest.raises(DataError, match="rank"):
            ls_fit(basis, np.ones(10))
