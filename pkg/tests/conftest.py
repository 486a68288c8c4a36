import numpy as np
import pytest

from ucmoa.ensemble import EnsembleConfig, train_ensemble

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS = {}


@pytest.fixture(scope="session")
def small_ensemble():
    """A quickly trained M=4, K=2 ensemble shared by tests that only need *some* utilities."""
    return train_ensemble(EnsembleConfig(m_utilities=4, steps=40, seed=3, hidden=8))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
