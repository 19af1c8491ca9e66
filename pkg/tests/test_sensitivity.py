import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linboot.bootstrap import replicate_weights
from linboot.derivatives import DerivativeBundle, KLObjective
from linboot.errors import NotStrictMinimumError
from linboot.model import cluster_probs
from linboot.optimize import Schedule, multi_restart, optimize
from linboot.sensitivity import (
    RESIDUAL_TOL,
    SensitivityMatrix,
    WeightedQuadratic,
    compute_S,
    eta_lin,
    predict_clustering,
    sensitivity_for,
)

TIGHT = Schedule(gtol=1e-10)


@pytest.fixture(scope="module")
def base_sens(small_objective, small_fit):
    return sensitivity_for(small_objective, small_fit.eta_star)


class TestComputeS:
    def test_weighted_quadratic_scalar(self):
        y = np.array([0.3, -1.2, 2.5, 0.0, 4.1])
        q = WeightedQuadratic(y)
        eta = q.argmin()
        sens = compute_S(DerivativeBundle(q.grad(eta), q.hessian(eta), q.cross(eta)), eta)
        expected = (y - y.mean()) / y.size
        np.testing.assert_allclose(sens.S[0], expected, atol=1e-12, rtol=0)

    def test_weighted_quadratic_vector(self):
        y = np.random.default_rng(0).standard_normal((7, 3))
        q = WeightedQuadratic(y)
        sens = sensitivity_for(q, q.argmin())
        np.testing.assert_allclose(sens.S, q.exact_S(), atol=1e-12, rtol=0)
        assert sens.residual <= RESIDUAL_TOL

    def test_weighted_quadratic_matches_reoptimisation(self):
        y = np.random.default_rng(1).standard_normal((6, 2))
        q = WeightedQuadratic(y)
        S = q.exact_S()
        eps = 1e-3
        for g in range(6):
            e = np.zeros(6)
            e[g] = eps
            fd = (q.argmin(1 + e) - q.argmin(1 - e)) / (2 * eps)
            np.testing.assert_allclose(S[:, g], fd, atol=1e-10)

    def test_not_positive_definite(self):
        bundle = DerivativeBundle(np.zeros(2), np.diag([1.0, -1.0]), np.ones((2, 3)))
        with pytest.raises(NotStrictMinimumError, match="not a strict local minimum"):
            compute_S(bundle, np.zeros(2))

    def test_residual_invariant(self, small_objective, small_fit, base_sens):
        H = small_objective.hessian(small_fit.eta_star)
        C = small_objective.cross(small_fit.eta_star)
        S = base_sens.S
        lhs = np.linalg.norm(H @ S + C)
        rhs = 1e-8 * (np.linalg.norm(H) * np.linalg.norm(S) + np.linalg.norm(C))
        assert lhs <= rhs

    def test_duplicated_genes_identical_columns(self, small_data, priors):
        dup = small_data.subset(list(range(small_data.n_genes)) + [3])
        obj = KLObjective(dup, priors, 5)
        fit = multi_restart(obj, n_restarts=3, master_seed=1)
        S = sensitivity_for(obj, fit.eta_star).S
        np.testing.assert_allclose(S[:, 3], S[:, -1], rtol=1e-9, atol=1e-12)

    def test_S_is_read_only(self, base_sens):
        with pytest.raises(ValueError):
            base_sens.S[0, 0] = 1.0


class TestEtaLin:
    def test_unit_weights_return_base(self, base_sens, small_fit):
        np.testing.assert_array_equal(eta_lin(base_sens, np.ones(base_sens.n_genes)),
                                      small_fit.eta_star)

    def test_column_extraction(self, base_sens):
        n = base_sens.n_genes
        e = np.zeros(n)
        e[4] = 1e-3
        np.testing.assert_allclose(eta_lin(base_sens, 1 + e),
                                   base_sens.eta_star + 1e-3 * base_sens.S[:, 4],
                                   rtol=1e-14, atol=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0, 1), st.integers(0, 2 ** 32 - 1))
    def test_exactly_affine(self, base_sens, a, seed):
        rng = np.random.default_rng(seed)
        w1, w2 = rng.uniform(0, 3, (2, base_sens.n_genes))
        mix = eta_lin(base_sens, a * w1 + (1 - a) * w2)
        combo = a * eta_lin(base_sens, w1) + (1 - a) * eta_lin(base_sens, w2)
        np.testing.assert_allclose(mix, combo, atol=1e-10, rtol=1e-12)

    def test_shape_mismatch(self, base_sens):
        with pytest.raises(ValueError):
            eta_lin(base_sens, np.ones(3))

    def test_taylor_remainder_superlinear(self, small_objective, small_fit, base_sens):
        direction = np.random.default_rng(2).standard_normal(base_sens.n_genes)
        errs = []
        for eps in (0.04, 0.02, 0.01):
            w = 1 + eps * direction
            warm = optimize(small_objective, small_fit.eta_star, w, TIGHT)
            assert warm.converged
            errs.append(np.linalg.norm(eta_lin(base_sens, w) - warm.eta_star))
        # second-order remainder: halving eps should roughly quarter the error
        assert errs[1] < 0.4 * errs[0] and errs[2] < 0.4 * errs[1]


class TestPredictClustering:
    def test_unit_weights_match_base(self, base_sens, small_data, priors, small_fit):
        z = predict_clustering(eta_lin(base_sens, np.ones(base_sens.n_genes)), small_data,
                               priors)
        np.testing.assert_array_equal(z, cluster_probs(small_fit.eta_star, small_data, priors))

    def test_rows_valid_far_from_base(self, base_sens, small_data, priors):
        rng = np.random.default_rng(3)
        for scale in (1.0, 10.0, 100.0):
            w = rng.uniform(0, scale, base_sens.n_genes)
            z = predict_clustering(eta_lin(base_sens, w), small_data, priors)
            assert np.all(np.isfinite(z)) and np.all(z >= 0)
            np.testing.assert_allclose(z.sum(axis=1), 1.0, atol=1e-12)

    def test_close_to_warm_refits(self, small_objective, small_fit, base_sens, small_data,
                                  priors):
        diffs = []
        for b in range(10):
            _, w = replicate_weights(0, b, small_data.n_genes)
            z_lin = predict_clustering(eta_lin(base_sens, w), small_data, priors)
            warm = optimize(small_objective, small_fit.eta_star, w)
            z_warm = cluster_probs(warm.eta_star, small_data, priors)
            diffs.append(np.abs(z_lin - z_warm).ravel())
        assert np.median(np.concatenate(diffs)) < 0.05


def test_metadata(base_sens):
    assert isinstance(base_sens, SensitivityMatrix)
    meta = base_sens.metadata()
    assert meta["seconds"] > 0 and meta["residual"] <= RESIDUAL_TOL
