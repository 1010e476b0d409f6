import warnings

import numpy as np
import pytest

from diffguide.denoiser import GmmSpec
from diffguide.schedule import build_linear


@pytest.fixture
def lin100():
    return build_linear(100)


@pytest.fixture
def two_gmm():
    return GmmSpec([0.5, 0.5], [[-3.0, 0.0], [3.0, 0.0]], [[1.0, 1.0], [1.0, 1.0]])


@pytest.fixture(autouse=True)
def _quiet_filter_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="rejection filter", category=RuntimeWarning)
        yield


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-12))


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
