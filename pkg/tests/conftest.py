import sys

import numpy as np
import pytest
from hypothesis import settings

from ave3net import tensor as T
from ave3net.tensor import Tensor

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


def weighted_sum(out, seed=1):
    """Scalar probe: sum(out * fixed random weights), so every output element matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.tsum(out * Tensor(w.astype(out.dtype)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
