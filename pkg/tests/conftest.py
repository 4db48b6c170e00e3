import numpy as np
import pytest
from hypothesis import settings

from hgac import kernels

settings.register_profile("hgac", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("hgac")


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    previous = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
