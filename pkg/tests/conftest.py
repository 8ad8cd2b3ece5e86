import numpy as np
import pytest
from hypothesis import settings

from spatial_interference.panel import CoefficientSet, GridShape, PanelData, neighbor_order
from spatial_interference.solvers import fitted_values

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

ACCEPTANCE = {}


def record_acceptance(key, name, passed, detail):
    ACCEPTANCE[key] = (name, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {key}. {name}: {detail}")


def make_panel(R=3, C=3, n=40, d=2, seed=0, noise=1.0, S_density=0.0, L=None, S_scale=0.5):
    """Small synthetic panel with N(0,1) states, fair +-1 treatments and
    optional random sparse interference; returns ``(data, coeffs)``."""
    rng = np.random.default_rng(seed)
    shape = GridShape(R, C)
    X = rng.standard_normal((n, R, C, d))
    M = np.where(rng.random((n, R, C)) < 0.5, -1.0, 1.0)
    beta = rng.standard_normal((R, C, d))
    L = np.zeros((R, C)) if L is None else np.asarray(L, float)
    S = np.zeros((R, C, shape.P - 1))
    if S_density > 0:
        mask = rng.random(S.shape) < S_density
        S[mask] = S_scale * rng.choice([-1.0, 1.0], size=mask.sum())
    coeffs = CoefficientSet(beta, L, S)
    mean = fitted_values(PanelData(np.zeros((n, R, C)), X, M), coeffs, neighbor_order(shape))
    Y = mean + noise * rng.standard_normal((n, R, C))
    return PanelData(Y, X, M), coeffs


@pytest.fixture
def small_panel():
    return make_panel()
