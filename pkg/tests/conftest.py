import math

import numpy as np
import pytest

from chafee.noise import CovarianceSpec, random_spec
from chafee.spectral import Grid, Potential, solve_spectrum


@pytest.fixture(scope="session")
def grid200():
    return Grid(2 * math.pi, 200)


@pytest.fixture(scope="session")
def g_cos(grid200):
    return Potential.from_descriptor("cos3plus1", grid200)


@pytest.fixture(scope="session")
def g_lin(grid200):
    return Potential.from_descriptor("linear", grid200)


@pytest.fixture(scope="session")
def basis_cos(grid200, g_cos):
    return solve_spectrum(grid200, g_cos, 60)


@pytest.fixture(scope="session")
def basis_lin(grid200, g_lin):
    return solve_spectrum(grid200, g_lin, 60)


@pytest.fixture(scope="session")
def spec10():
    return random_spec(10, 10, 3)


@pytest.fixture(scope="session")
def grid_pi():
    return Grid(math.pi, 100)


@pytest.fixture(scope="session")
def identity_spec():
    return CovarianceSpec.identity(10)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance reporting

VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")
    config.stash[VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """Call ``verdict(ok, detail)`` once; a test that errors first is reported as FAIL."""
    mark = request.node.get_closest_marker("criterion")
    number, title = mark.args
    table = request.config.stash[VERDICTS]
    seen = []

    def record(ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}"
        seen.append(ok)
        table[number] = line
        print(line)
        assert ok, line

    yield record
    if not seen:
        table[number] = f"FAIL criterion {number:>2} {title}: raised before a verdict"


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(VERDICTS, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        terminalreporter.write_line(table[n])
