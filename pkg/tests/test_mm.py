import numpy as np
import pytest

from nnrpanel.admm import estimate_nnr_admm
from nnrpanel.errors import ValidationError
from nnrpanel.losses import rc_pack, standard_draws
from nnrpanel.mm import (
    MmOptions, MmState, estimate_nnr_mm, moment_update, penalized_objective, psd_cholesky, surrogate_value,
)
from nnrpanel.panel import ModelSpec, PanelData


def rc_panel(N=30, T=30, p=2, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(p, N, T))
    beta = 1.0 + np.sqrt(0.3) * rng.normal(size=(p, N, T))
    Pi = rng.normal(size=(N, 1)) @ rng.normal(size=(1, T))
    v = (X * beta).sum(0) + Pi
    Y = (rng.random((N, T)) < 1 / (1 + np.exp(-v))).astype(float)
    return PanelData(Y, X)


NU = 0.3 * 2 * np.sqrt(30) / 900


@pytest.mark.parametrize("theta_step", ["moments", "newton"])
def test_frozen_descent_100_iterations(theta_step):
    panel = rc_panel()
    trace = []
    opts = MmOptions(mode="frozen", theta_step=theta_step, tol=1e-14, max_iter=100, seed=1)
    est, _ = estimate_nnr_mm(panel, ModelSpec.rclogit(50), NU, opts, trace=trace)
    assert len(trace) == 100
    assert np.diff(trace).max() <= 1e-8


def _state_after(panel, k, R=30, seed=2):
    opts = MmOptions(mode="frozen", tol=1e-14, max_iter=k, seed=seed)
    _, params, state = estimate_nnr_mm(panel, ModelSpec.rclogit(R), NU, opts, return_state=True)
    return state, params.draws


def test_surrogate_tangency():
    panel = rc_panel(seed=3)
    state, draws = _state_after(panel, 5)
    q = surrogate_value(state, panel, NU, state.Pi, draws)
    obj = penalized_objective(panel, state.theta, state.Pi, draws, NU)
    assert q == pytest.approx(obj, abs=1e-10)


@pytest.mark.parametrize("curvature", [1.0, 0.25])
def test_svt_step_minimizes_surrogate_and_majorizes(curvature):
    from nnrpanel.lowrank import soft_threshold
    from nnrpanel.mm import _Sim, _weights

    panel = rc_panel(seed=4)
    state, draws = _state_after(panel, 3)
    sim = _Sim(panel, draws)
    v, a = sim.run(state.beta_bar, state.sigma_chol, state.Pi)
    G = sim.gradient(v, _weights(a))
    nxt = soft_threshold(state.Pi - G / curvature, 900 * NU / curvature)
    q_next = surrogate_value(state, panel, NU, nxt, draws, curvature)
    assert q_next <= surrogate_value(state, panel, NU, state.Pi, draws, curvature)
    rng = np.random.default_rng(5)
    for _ in range(20):
        cand = nxt + 0.05 * rng.normal(size=nxt.shape)
        assert surrogate_value(state, panel, NU, cand, draws, curvature) >= q_next - 1e-12
    for _ in range(100):
        Pi = state.Pi + rng.uniform(0.01, 2.0) * rng.normal(size=state.Pi.shape)
        q = surrogate_value(state, panel, NU, Pi, draws, curvature)
        assert q >= penalized_objective(panel, state.theta, Pi, draws, NU) - 1e-8


def test_weights_normalized_and_cholesky_positive():
    panel = rc_panel(seed=6)
    state, _ = _state_after(panel, 4)
    np.testing.assert_allclose(state.weights.sum(-1), 1.0, atol=1e-10)
    assert np.all(state.weights >= 0)
    assert np.all(np.diag(state.sigma_chol) > 0)


def test_moment_update_collapse():
    b = np.array([0.5, -1.0, 2.0])
    betas = np.tile(b, (4, 6, 1))
    bb, S = moment_update(betas, np.full((4, 6), 1 / 6))
    np.testing.assert_allclose(bb, b, atol=1e-14)
    np.testing.assert_allclose(S, 0.0, atol=1e-14)


def test_psd_projection_floor():
    S = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues 3, -1
    L, clipped = psd_cholesky(S)
    assert clipped
    assert np.linalg.eigvalsh(L @ L.T).min() >= 1e-8 * 0.999


def test_zero_sigma_matches_fixed_coefficient_logit():
    panel = rc_panel(seed=7)
    opts = MmOptions(mode="frozen", sigma_init=0.0, tol=1e-8, max_iter=500)
    est, params = estimate_nnr_mm(panel, ModelSpec.rclogit(1), NU, opts)
    assert np.all(params.sigma_chol == 0)
    ref = estimate_nnr_admm(panel, ModelSpec.logit(), NU)
    np.testing.assert_allclose(est.theta[:2], ref.theta, atol=5e-2)


def test_redraw_mode_is_deterministic():
    panel = rc_panel(N=12, T=10, seed=8)
    opts = MmOptions(max_iter=15, seed=4)
    a, _ = estimate_nnr_mm(panel, ModelSpec.rclogit(10), NU, opts)
    b, _ = estimate_nnr_mm(panel, ModelSpec.rclogit(10), NU, opts)
    assert np.array_equal(a.theta, b.theta) and np.array_equal(a.Pi, b.Pi)


def test_reported_objective_uses_evaluation_draws():
    panel = rc_panel(N=12, T=10, seed=9)
    est, params = estimate_nnr_mm(panel, ModelSpec.rclogit(10), NU, MmOptions(max_iter=20, seed=3))
    np.testing.assert_array_equal(params.draws, standard_draws(12, 10, 10, 2, [3]))
    theta = rc_pack(params.beta_bar, params.sigma_chol)
    assert est.objective == pytest.approx(penalized_objective(panel, theta, est.Pi, params.draws, NU), rel=1e-12)


def test_option_validation():
    with pytest.raises(ValidationError):
        MmOptions(mode="sometimes")
    with pytest.raises(ValidationError):
        MmOptions(theta_step="newton")  # needs frozen draws
    with pytest.raises(ValidationError):
        MmOptions(curvature=0.1)
    with pytest.raises(ValidationError):
        estimate_nnr_mm(rc_panel(N=5, T=5), ModelSpec.logit(), NU)
