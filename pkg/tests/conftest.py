import time

import numpy as np
import pytest

from hoiassist import dataset as ds
from hoiassist.mpm.training import TrainingConfig, train_mpm

# criterion number -> (passed, detail); filled by test_acceptance, echoed at the end of the run
ACCEPTANCE: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running check")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


class Trained:
    def __init__(self):
        start = time.perf_counter()
        data = ds.default_dataset(seed=0)
        self.data = data
        self.train, self.validation = ds.stratified_split(data, 0.8, seed=0)
        self.network, self.trace = train_mpm(self.train, self.validation, TrainingConfig())
        self.seconds = time.perf_counter() - start


@pytest.fixture(scope="session")
def trained():
    """Default pipeline trained once per session."""
    return Trained()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
