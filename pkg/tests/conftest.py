import numpy as np
import pytest

from progsae import _kernels

AVAILABLE = [b for b in _kernels.BACKENDS if b != "numba" or _kernels.numba is not None]


@pytest.fixture(params=AVAILABLE)
def backend(request):
    with _kernels.use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[number])
