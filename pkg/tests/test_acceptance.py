"""The twelve acceptance criteria at their stated tolerances.

Each criterion runs once per session; shared ensembles are cached across
criteria. One ``[PASS]``/``[FAIL]`` line per criterion is printed in the
terminal summary.
"""
import pytest

from allen_cahn_clt import suites
from allen_cahn_clt.config import RunConfig

RESULT_LINES = []


@pytest.fixture(scope="session")
def config():
    suites.clear_cache()
    yield RunConfig()
    suites.clear_cache()


@pytest.mark.slow
@pytest.mark.parametrize("label,check", suites.ACCEPTANCE, ids=[c[0] for c in suites.ACCEPTANCE])
def test_criterion(label, check, config):
    result = check(config)
    RESULT_LINES.append(result.line())
    print(result.line())
    assert result.passed, result.line()
