import numpy as np
import pytest

from volfit.synthetic import DgpSpec, simulate_panel


@pytest.fixture(scope="session")
def small_panel():
    return simulate_panel(DgpSpec(n_assets=3, n_days=800, beta_v=0.005, rng_seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
