import numpy as np
import pytest

from linboot.bootstrap import (
    BootstrapConfig,
    BootstrapRun,
    ReplicateResult,
    replicate_seed,
    replicate_weights,
    run_bootstrap,
    run_replicate,
    sample_weights,
)
from linboot.data_io import default_times, simulate
from linboot.derivatives import KLObjective
from linboot.model import cluster_probs
from linboot.optimize import multi_restart
from linboot.sensitivity import SensitivityMatrix, sensitivity_for


@pytest.fixture(scope="module")
def setup(small_objective, small_fit):
    sens = sensitivity_for(small_objective, small_fit.eta_star)
    zeta = cluster_probs(small_fit.eta_star, small_objective.data, small_objective.priors)
    return small_objective, small_fit.eta_star, zeta, sens


@pytest.fixture(scope="module")
def separated(priors):
    data, _ = simulate(40, 3, default_times(14), separation=10, seed=6, noise_sd=0.5)
    obj = KLObjective(data, priors, 3)
    fit = multi_restart(obj, n_restarts=5, master_seed=0)
    sens = sensitivity_for(obj, fit.eta_star)
    return obj, fit.eta_star, cluster_probs(fit.eta_star, data, priors), sens


class TestWeights:
    def test_total(self):
        rng = np.random.default_rng(0)
        for n in (1, 2, 17, 100):
            w = sample_weights(n, rng)
            assert w.sum() == n and np.all(w == np.round(w)) and np.all(w >= 0)

    def test_single_gene(self):
        np.testing.assert_array_equal(sample_weights(1, np.random.default_rng(1)), [1.0])

    def test_moments(self):
        n = 20
        rng = np.random.default_rng(2)
        draws = np.array([sample_weights(n, rng) for _ in range(10_000)])
        assert np.all(np.abs(draws.mean(axis=0) - 1) < 0.05)
        var = draws.var(axis=0, ddof=1)
        assert np.all(np.abs(var / ((n - 1) / n) - 1) < 0.1)

    def test_invalid(self):
        with pytest.raises(ValueError):
            sample_weights(0, np.random.default_rng(0))

    def test_seed_streams(self):
        assert replicate_seed(0, 1) == replicate_seed(0, 1)
        assert replicate_seed(0, 1) != replicate_seed(0, 2)
        assert replicate_seed(0, 1) != replicate_seed(1, 1)
        s, w = replicate_weights(3, 4, 25)
        s2, w2 = replicate_weights(3, 4, 25)
        assert s == s2 and np.array_equal(w, w2)


class TestRunReplicate:
    @pytest.mark.parametrize("mode", ["linear", "warm", "cold"])
    def test_unit_weights_give_identity(self, separated, mode):
        obj, eta, zeta, sens = separated
        cfg = BootstrapConfig(cold_restarts=3)
        r = run_replicate(mode, np.ones(obj.data.n_genes), obj, eta, zeta, sens, cfg)
        assert abs(r.fm - 1) < 1e-10 and abs(r.nmi - 1) < 1e-10
        assert r.seconds > 0 and r.converged

    def test_warm_below_linear_objective(self, setup):
        obj, eta, zeta, sens = setup
        cfg = BootstrapConfig(evaluate_linear_kl=True)
        for b in range(5):
            seed, w = replicate_weights(0, b, obj.data.n_genes)
            lin = run_replicate("linear", w, obj, eta, zeta, sens, cfg, b, seed)
            warm = run_replicate("warm", w, obj, eta, zeta, sens, cfg, b, seed)
            assert warm.kl <= lin.kl
            assert warm.kl <= obj.value(eta, w)

    def test_linear_kl_off_by_default(self, setup):
        obj, eta, zeta, sens = setup
        r = run_replicate("linear", np.ones(obj.data.n_genes), obj, eta, zeta, sens,
                          BootstrapConfig())
        assert np.isnan(r.kl)

    def test_linear_requires_sensitivity(self, setup):
        obj, eta, zeta, _ = setup
        with pytest.raises(ValueError):
            run_replicate("linear", np.ones(obj.data.n_genes), obj, eta, zeta, None,
                          BootstrapConfig())

    def test_gene_relabelling_invariance(self, setup):
        obj, eta, zeta, sens = setup
        data = obj.data
        perm = np.random.default_rng(4).permutation(data.n_genes)
        pobj = KLObjective(data.subset(perm), obj.priors, obj.n_clusters)
        psens = SensitivityMatrix(S=sens.S[:, perm], eta_star=eta)
        pzeta = zeta[perm]
        cfg = BootstrapConfig()
        _, w = replicate_weights(0, 0, data.n_genes)
        for mode in ("linear", "warm"):
            a = run_replicate(mode, w, obj, eta, zeta, sens, cfg)
            b = run_replicate(mode, w[perm], pobj, eta, pzeta, psens, cfg)
            assert abs(a.fm - b.fm) < 1e-6 and abs(a.nmi - b.nmi) < 1e-6


class TestRunBootstrap:
    def test_deterministic_and_paired(self, setup):
        obj, eta, _, sens = setup
        cfg = BootstrapConfig(n_boot=3, cold_restarts=2)
        a = run_bootstrap(cfg, obj.data, obj.priors, obj.n_clusters, eta, sens)
        b = run_bootstrap(cfg, obj.data, obj.priors, obj.n_clusters, eta, sens)
        key = lambda r: (r.replicate, r.mode, r.weights_seed, r.fm, r.nmi, r.kl)  # noqa: E731
        assert [key(r) for r in a.replicates] == [key(r) for r in b.replicates]
        assert [(r.replicate, r.mode) for r in a.replicates] == \
            [(i, m) for i in range(3) for m in ("linear", "warm", "cold")]
        for i in range(3):
            seeds = {r.weights_seed for r in a.replicates if r.replicate == i}
            assert seeds == {replicate_seed(0, i)}

    def test_summary(self, setup):
        obj, eta, _, sens = setup
        cfg = BootstrapConfig(n_boot=4, modes=("linear", "warm"))
        run = run_bootstrap(cfg, obj.data, obj.priors, obj.n_clusters, eta, sens)
        s = run.summary()
        assert set(s) == {"linear", "warm"}
        assert s["linear"]["n"] == 4 and s["linear"]["n_failed"] == 0
        assert s["linear"]["median_seconds"] < s["warm"]["median_seconds"]
        assert 0 <= s["warm"]["fm"]["min"] <= s["warm"]["fm"]["max"] <= 1

    def test_failed_replicates_excluded(self):
        z = np.eye(2)
        reps = [ReplicateResult(0, "warm", 1, 0.9, 0.8, 1.0, 0.5, True, z),
                ReplicateResult(1, "warm", 2, 0.1, 0.1, 9.0, 2.0, False, z)]
        s = BootstrapRun(reps, z).summary()["warm"]
        assert s["n"] == 1 and s["n_failed"] == 1 and s["median_seconds"] == 0.5

    def test_linear_without_sensitivity(self, setup):
        obj, eta, _, _ = setup
        with pytest.raises(ValueError):
            run_bootstrap(BootstrapConfig(n_boot=1), obj.data, obj.priors, obj.n_clusters,
                          eta, None)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BootstrapConfig(modes=("linear", "hot"))
        with pytest.raises(ValueError):
            BootstrapConfig(n_boot=0)
        assert BootstrapConfig().n_boot == 200 and BootstrapConfig().cold_restarts == 10
