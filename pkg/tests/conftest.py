import numpy as np
import pytest

from taskforge import parallel
from taskforge.taskvec import TaskVector


def make_tv(sid, arrays, base_hash="b0"):
    return TaskVector({k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}, sid, base_hash)


def random_tvs(n, shapes, seed=0, scale=1.0, base_hash="b0"):
    g = np.random.default_rng(seed)
    return [
        make_tv(f"v{i}", {name: scale * g.standard_normal(shape) for name, shape in shapes.items()}, base_hash)
        for i in range(n)
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _reset_threads():
    yield
    parallel.set_threads(None)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
