import numpy as np
import pytest

from nnrpanel.panel import PanelData


def logit_panel(N, T, p=2, r=1, seed=0, theta=None):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(p, N, T))
    theta = np.ones(p) if theta is None else np.asarray(theta, float)
    Pi = rng.normal(size=(N, r)) @ rng.normal(size=(T, r)).T if r else np.zeros((N, T))
    v = np.tensordot(theta, X, axes=1) + Pi
    Y = (rng.random((N, T)) < 1 / (1 + np.exp(-v))).astype(float)
    return PanelData(Y, X), Pi


def linear_panel(N, T, p=2, r=1, seed=0, noise=0.0, theta=None):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(p, N, T))
    theta = np.ones(p) if theta is None else np.asarray(theta, float)
    Lam, F = rng.normal(size=(N, r)), rng.normal(size=(T, r))
    Pi = Lam @ F.T
    Y = np.tensordot(theta, X, axes=1) + Pi + noise * rng.normal(size=(N, T))
    return PanelData(Y, X), Pi


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one PASS/FAIL line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
