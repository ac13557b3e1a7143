import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedgraph.graphmap import TopoGraph

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_graph(rng, n_min=2, n_max=8, p=0.4, binary=True) -> TopoGraph:
    n = int(rng.integers(n_min, n_max + 1))
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < p
    w = np.ones(keep.sum()) if binary else rng.random(keep.sum())
    return TopoGraph(n, iu[keep], ju[keep], w, binary)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
