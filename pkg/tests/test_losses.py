import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnrpanel.errors import ValidationError
from nnrpanel.losses import (
    RcLogitLoss, RcLogitParams, aggregate_loss, cell_derivatives, cell_loss, make_loss, rc_n_theta, rc_pack,
    rc_unpack, rc_weights, standard_draws,
)
from nnrpanel.panel import ModelSpec, PanelData

FAMILIES = {
    "linear": ModelSpec.linear(),
    "logit": ModelSpec.logit(),
    "probit": ModelSpec.binary("normal"),
    "logistic-cdf": ModelSpec.binary("logistic"),
    "quantile": ModelSpec.quantile(0.3, 0.5),
}
FIELDS = ("d_pi", "d_pi2", "d_pi3", "d_theta", "d_theta_theta", "d_theta_pi", "d_theta_pi2")


def _close(a, b, rel):
    """|a - b| <= rel * max(|a|, |b|, 1), elementwise."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / scale))


def _fd_errors(loss_fn, deriv_fn, theta, pi, h):
    """Worst relative error of each bundle entry against a central difference
    of the next-lower-order quantity."""
    b = deriv_fn(theta, pi)
    q = theta.size
    errs = {}

    def d_theta(fn):
        out = []
        for k in range(q):
            e = np.zeros(q)
            e[k] = h
            out.append((fn(theta + e, pi) - fn(theta - e, pi)) / (2 * h))
        return np.array(out)

    def d_pi(fn):
        return (fn(theta, pi + h) - fn(theta, pi - h)) / (2 * h)

    errs["d_pi"] = _close(b.d_pi, d_pi(loss_fn), 1)
    errs["d_pi2"] = _close(b.d_pi2, d_pi(lambda t, p: deriv_fn(t, p).d_pi), 1)
    errs["d_pi3"] = _close(b.d_pi3, d_pi(lambda t, p: deriv_fn(t, p).d_pi2), 1)
    errs["d_theta"] = _close(b.d_theta, d_theta(loss_fn), 1)
    errs["d_theta_theta"] = _close(b.d_theta_theta, d_theta(lambda t, p: deriv_fn(t, p).d_theta).T, 1)
    errs["d_theta_pi"] = _close(b.d_theta_pi, d_pi(lambda t, p: deriv_fn(t, p).d_theta), 1)
    errs["d_theta_pi2"] = _close(b.d_theta_pi2, d_pi(lambda t, p: deriv_fn(t, p).d_theta_pi), 1)
    return errs


@pytest.mark.parametrize("name", list(FAMILIES))
def test_single_index_bundle_matches_finite_differences(name):
    spec = FAMILIES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = dict.fromkeys(FIELDS, 0.0)
    for _ in range(1000):
        x = rng.normal(size=3)
        theta = rng.normal(size=3) * 0.5
        pi = rng.normal() * 1.5
        if name in ("linear", "quantile"):
            y = rng.normal() * 2
        else:
            y = float(rng.random() < 0.5)
        errs = _fd_errors(
            lambda t, p: cell_loss(spec, y, x, t, p), lambda t, p: cell_derivatives(spec, y, x, t, p), theta, pi,
            1e-5,
        )
        for k, v in errs.items():
            worst[k] = max(worst[k], v)
    assert max(worst.values()) < 1e-6, worst


def test_rc_logit_bundle_matches_finite_differences():
    spec = ModelSpec.rclogit(draws=20)
    rng = np.random.default_rng(99)
    p = 2
    worst = dict.fromkeys(FIELDS, 0.0)
    for _ in range(1000):
        x = rng.normal(size=p)
        draws = rng.normal(size=(20, p))
        C = np.tril(rng.normal(size=(p, p)) * 0.5)
        theta = rc_pack(rng.normal(size=p) * 0.5, C)
        pi = rng.normal()
        y = float(rng.random() < 0.5)
        errs = _fd_errors(
            lambda t, q: cell_loss(spec, y, x, t, q, draws), lambda t, q: cell_derivatives(spec, y, x, t, q, draws),
            theta, pi, 1e-5,
        )
        for k, v in errs.items():
            worst[k] = max(worst[k], v)
    assert max(worst.values()) < 1e-6, worst


def test_logit_examples():
    spec = ModelSpec.logit()
    assert cell_loss(spec, 1.0, [], [], 0.0) == pytest.approx(np.log(2.0), abs=1e-12)
    b = cell_derivatives(spec, 1.0, [0.0], [0.0], 0.0)
    assert b.d_pi == pytest.approx(-0.5) and b.d_pi2 == pytest.approx(0.25)


def test_linear_zero_residual():
    x, th = np.array([1.0, -2.0]), np.array([0.5, 0.25])
    assert cell_loss(ModelSpec.linear(), x @ th + 0.3, x, th, 0.3) == 0.0


def test_rc_degenerate_equals_logit():
    spec = ModelSpec.rclogit(draws=1)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, b, pi, y = rng.normal(size=3), rng.normal(size=3), rng.normal(), float(rng.random() < 0.5)
        theta = rc_pack(b, np.zeros((3, 3)))
        got = cell_loss(spec, y, x, theta, pi, rng.normal(size=(1, 3)))
        assert got == pytest.approx(cell_loss(ModelSpec.logit(), y, x, b, pi), abs=1e-12)


def test_single_index_chain_rule_and_symmetry():
    rng = np.random.default_rng(1)
    for spec in FAMILIES.values():
        x = rng.normal(size=3)
        b = cell_derivatives(spec, 1.0, x, rng.normal(size=3), 0.2)
        np.testing.assert_allclose(b.d_theta, x * b.d_pi, atol=1e-14)
        np.testing.assert_allclose(b.d_theta_pi, x * b.d_pi2, atol=1e-14)
        np.testing.assert_allclose(b.d_theta_pi2, x * b.d_pi3, atol=1e-14)
        np.testing.assert_allclose(b.d_theta_theta, b.d_theta_theta.T, atol=1e-10)
    draws = rng.normal(size=(30, 3))
    theta = rc_pack(rng.normal(size=3), np.tril(rng.normal(size=(3, 3))))
    b = cell_derivatives(ModelSpec.rclogit(30), 0.0, rng.normal(size=3), theta, 0.1, draws)
    np.testing.assert_allclose(b.d_theta_theta, b.d_theta_theta.T, atol=1e-10)


def test_logit_convex_in_index_direction_and_pi():
    rng = np.random.default_rng(2)
    for _ in range(200):
        x, th, pi, y = rng.normal(size=3), rng.normal(size=3), rng.normal(), float(rng.random() < 0.5)
        b = cell_derivatives(ModelSpec.logit(), y, x, th, pi)
        u = x / np.linalg.norm(x)
        H = np.array([[u @ b.d_theta_theta @ u, u @ b.d_theta_pi], [u @ b.d_theta_pi, b.d_pi2]])
        assert np.linalg.eigvalsh(H).min() >= -1e-10


@settings(max_examples=100, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.01, 0.5), st.floats(-20, 20))
def test_smoothed_check_approaches_check_function(tau, h, u):
    if abs(u) <= h:
        return
    loss = make_loss(ModelSpec.quantile(tau, h))
    smooth = float(loss.index_loss(np.array(u), np.array(0.0)))
    exact = u * (tau - float(u < 0))
    # |u K(-|u|/h)| <= h sup_s s/(1+e^s) < 0.28 h
    assert abs(smooth - exact) <= 0.3 * h


def test_rc_weights():
    rng = np.random.default_rng(3)
    one = RcLogitParams(np.ones(2), np.eye(2), rng.normal(size=(1, 2)))
    np.testing.assert_allclose(rc_weights(1.0, [0.5, 0.5], one, 0.0), [1.0])
    same = RcLogitParams(np.ones(2), np.eye(2), np.tile(rng.normal(size=(1, 2)), (7, 1)))
    np.testing.assert_allclose(rc_weights(0.0, [0.5, -1.0], same, 0.3), np.full(7, 1 / 7), atol=1e-15)
    draws = rng.normal(size=(50, 2))
    par = RcLogitParams(np.array([0.2, -0.4]), np.array([[1.0, 0.0], [0.3, 0.5]]), draws)
    x, pi, y = np.array([1.5, -0.7]), 0.2, 1.0
    w = rc_weights(y, x, par, pi)
    betas = par.beta_bar + draws @ par.sigma_chol.T
    lik = 1 / (1 + np.exp(-(betas @ x + pi)))
    np.testing.assert_allclose(w, lik / lik.sum(), rtol=1e-12)
    assert w.sum() == pytest.approx(1.0, abs=1e-12) and np.all(w >= 0)
    # extreme index: every likelihood underflows, weights still normalize
    w = rc_weights(1.0, np.array([1e3, 1e3]), RcLogitParams(np.array([-5.0, -5.0]), np.eye(2), draws), 0.0)
    assert np.isfinite(w).all() and w.sum() == pytest.approx(1.0)


def test_rc_loss_deterministic_and_pack_round_trip():
    draws = standard_draws(4, 5, 10, 2, [3])
    np.testing.assert_array_equal(draws, standard_draws(4, 5, 10, 2, [3]))
    rng = np.random.default_rng(4)
    Y = (rng.random((4, 5)) < 0.5).astype(float)
    X = rng.normal(size=(2, 4, 5))
    theta = rng.normal(size=rc_n_theta(2))
    loss = RcLogitLoss(draws)
    a = loss.value(Y, X, theta, np.zeros((4, 5)))
    b = loss.value(Y, X, theta, np.zeros((4, 5)))
    assert np.array_equal(a, b)
    bb, C = rc_unpack(theta, 2)
    np.testing.assert_array_equal(rc_pack(bb, C), theta)


def test_aggregate_loss_brute_force():
    rng = np.random.default_rng(5)
    Y = (rng.random((3, 3)) < 0.5).astype(float)
    X = rng.normal(size=(2, 3, 3))
    Pi = rng.normal(size=(3, 3))
    th = rng.normal(size=2)
    spec = ModelSpec.logit()
    direct = sum(cell_loss(spec, Y[i, t], X[:, i, t], th, Pi[i, t]) for i in range(3) for t in range(3)) / 9
    assert aggregate_loss(spec, PanelData(Y, X), th, Pi) == pytest.approx(direct, rel=1e-14)
    mask = np.ones((3, 3), bool)
    mask[1, 1] = False
    direct = sum(cell_loss(spec, Y[i, t], X[:, i, t], th, Pi[i, t]) for i in range(3) for t in range(3)
                 if mask[i, t]) / 8
    assert aggregate_loss(spec, PanelData(Y, X, mask), th, Pi) == pytest.approx(direct, rel=1e-14)


def test_aggregate_loss_zero_at_truth_and_perfect_fit_limit():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(2, 4, 4))
    Pi = rng.normal(size=(4, 4))
    th = np.array([1.0, -1.0])
    Y = np.tensordot(th, X, axes=1) + Pi
    assert aggregate_loss(ModelSpec.linear(), PanelData(Y, X), th, Pi) == 0.0
    ones = PanelData(np.ones((4, 4)), X)
    vals = [aggregate_loss(ModelSpec.logit(), ones, np.zeros(2), np.full((4, 4), c)) for c in (1, 5, 10, 40)]
    assert all(a > b for a, b in zip(vals, vals[1:])) and vals[-1] < 1e-15


def test_non_finite_input_rejected():
    with pytest.raises(ValidationError):
        cell_loss(ModelSpec.logit(), 1.0, [np.inf], [1.0], 0.0)
