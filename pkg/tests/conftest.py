import numpy as np
import pytest

import linboot  # noqa: F401  (float64 for jax)
from linboot.data_io import default_times, simulate
from linboot.derivatives import KLObjective
from linboot.model import Priors, pack
from linboot.optimize import kmeans_init, multi_restart

_ACCEPTANCE = []


@pytest.fixture
def record_criterion():
    """Register an acceptance-criterion outcome for the terminal summary."""

    def _record(number, title, passed, detail=""):
        _ACCEPTANCE.append((number, title, bool(passed), detail))
        print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {status}  {title}  ({detail})")


@pytest.fixture(scope="session")
def priors():
    return Priors()


@pytest.fixture(scope="session")
def small_data():
    """Seeded instance with 30 genes, 14 observations and df=7."""
    data, _ = simulate(30, 3, default_times(14), seed=11)
    return data


@pytest.fixture(scope="session")
def small_objective(small_data, priors):
    obj = KLObjective(small_data, priors, 5)
    obj.warm_up(cross=True)
    return obj


@pytest.fixture(scope="session")
def small_fit(small_objective):
    return multi_restart(small_objective, n_restarts=5, master_seed=3)


@pytest.fixture(scope="session")
def random_eta(small_data, priors):
    """A generic (non-optimal) point of the K=5 free space."""
    rng = np.random.default_rng(5)
    eta = pack(kmeans_init(small_data, 5, priors, seed=1))
    return eta + 0.1 * rng.standard_normal(eta.size)
