import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pointer_sentinel import numerics as nx
from pointer_sentinel import recurrent as rc

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def rel_error(analytic, numeric, floor=1e-7):
    """Elementwise |a - n| / max(|a| + |n|, floor), maximised."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def make_params(V=12, H=8, depth=1, seed=0, pointer=True, scale=0.3):
    # a wider init than the default so gates and attention are far from uniform
    return rc.init_params(V, H, depth, nx.make_rng(seed), pointer=pointer,
                          init_scale=scale, dtype=np.float64)


@pytest.fixture
def rng():
    return nx.make_rng(1234)


# one PASS/FAIL line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
