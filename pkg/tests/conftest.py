import numpy as np
import pytest

from sapbench import autodiff as ad


@pytest.fixture(autouse=True)
def _restore_precision():
    prev = ad.get_dtype()
    yield
    ad._set_raw(prev)


@pytest.fixture
def f64():
    with ad.precision("float64"):
        yield


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
