import warnings

import numpy as np
import pytest

from hetbounds.roy_simulator import RoyConfig, simulate, true_nuisance


@pytest.fixture(autouse=True)
def _quiet_learner_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", category=UserWarning, module="hetbounds")
        yield


@pytest.fixture(scope="session")
def roy_small():
    cfg = RoyConfig(n=1500, seed=11)
    return cfg, simulate(cfg)


@pytest.fixture(scope="session")
def roy_oracle_large():
    cfg = RoyConfig(n=50000, seed=5)
    table = simulate(cfg)
    return cfg, table, true_nuisance(table, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


_REPORT = []


@pytest.fixture(scope="session")
def criterion_report():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _REPORT.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_REPORT, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
