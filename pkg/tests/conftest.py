import numpy as np
import pytest

from acedlnm.fit import FitOptions, fit
from acedlnm.model import ModelSpec, PreparedModel, SmoothTerm
from acedlnm.simulate import ScenarioSpec, scenario_truth, simulate_dataset

SMALL_SPEC = ModelSpec(max_lag=15.0, n_knots_w=10, n_knots_f=10, smooth=(SmoothTerm("time", 6),))


@pytest.fixture(scope="session")
def small_truth():
    return scenario_truth(ScenarioSpec(n=500, n_rep=1))


@pytest.fixture(scope="session")
def small_data(small_truth):
    return simulate_dataset(small_truth, 8.0, np.random.default_rng(2024))


@pytest.fixture(scope="session")
def small_model(small_data):
    return PreparedModel(SMALL_SPEC, small_data)


@pytest.fixture(scope="session")
def small_fit(small_data):
    return fit(SMALL_SPEC, small_data, FitOptions())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance_report(request):
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def report(number, title, ok, detail):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
