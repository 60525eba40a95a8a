import numpy as np
import pytest
from hypothesis import settings

from allen_cahn_clt.grid import GridSpec, RngStream

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def grid3():
    return GridSpec(3, 16, 0.32)


@pytest.fixture
def rng():
    return RngStream(20240611, 0)


def z_score(value, target, se):
    return (value - target) / se


def sample_se(x):
    x = np.asarray(x)
    return x.std(ddof=1) / np.sqrt(len(x))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULT_LINES

    if RESULT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in RESULT_LINES:
            terminalreporter.write_line(line)
