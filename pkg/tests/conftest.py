import numpy as np
import pytest

from flowproc.model import make_coefficients


@pytest.fixture
def bm11():
    """b = 0, sigma1 = sigma2 = 1 in d = 1."""
    return make_coefficients({"b": 0.0, "sigma1": 1.0, "sigma2": 1.0})


@pytest.fixture
def private_only():
    return make_coefficients({"b": 0.0, "sigma1": 0.0, "sigma2": 1.0})


def gaussian_bump(var=0.5, center=0.0):
    return lambda x: np.exp(-((np.asarray(x, float) - center) ** 2) / (2 * var))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        ok, detail = results[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
