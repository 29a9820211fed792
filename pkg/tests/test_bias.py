import numpy as np
import pytest

from nnrpanel.bias import (
    BiasComponents, analytic_correction, bias_components_from_bundle, default_truncation,
    estimate_bias_components, estimate_xi, jackknife_combine, jackknife_correction, panel_bundle, split_selectors,
    standard_errors, xi_projection,
)
from nnrpanel.errors import InferenceError, JackknifeError, NumericalError
from nnrpanel.losses import DerivativeBundle
from nnrpanel.lowrank import FactorDecomposition, factorize_rank_r
from nnrpanel.panel import ModelSpec, PanelData
from nnrpanel.refine import RefineConfig, refine_iterative
from conftest import linear_panel, logit_panel
from oracles import two_way_projection


def components(W, B, D):
    return BiasComponents(np.asarray(W, float), np.asarray(B, float), np.asarray(D, float),
                          np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), 1, n_obs=100)


def projection_objective(target, s, Lambda, F, a, b):
    fit = np.einsum("ik,tk->it", a, F) + np.einsum("ik,tk->it", Lambda, b)
    return float(np.sum(s * (target - fit) ** 2))


def test_default_truncation():
    assert default_truncation(100) == 3
    assert default_truncation(16) == 2
    assert default_truncation(15) == 1


def test_xi_reproduces_in_span_target(rng):
    N, T, r, q = 15, 12, 2, 3
    fac = factorize_rank_r(rng.normal(size=(N, r)) @ rng.normal(size=(T, r)).T, r)
    a, b = rng.normal(size=(N, r, q)), rng.normal(size=(T, r, q))
    target = np.einsum("ikq,tk->itq", a, fac.F) + np.einsum("ik,tkq->itq", fac.Lambda, b)
    s = rng.uniform(0.1, 1.0, size=(N, T))
    xi, *_ = xi_projection(target, s, fac.Lambda, fac.F)
    assert np.linalg.norm(xi - target) / np.linalg.norm(target) < 1e-8


def test_xi_two_way_projection_oracle(rng):
    N, T = 9, 7
    panel = PanelData(rng.normal(size=(N, T)), rng.normal(size=(2, N, T)))
    ones = FactorDecomposition(np.ones((N, 1)), np.ones((T, 1)))
    proj = estimate_xi(panel, ModelSpec.linear(), np.zeros(2), ones)
    x = np.asarray(panel.X)
    for k in range(2):
        two_way = x[k].mean(1, keepdims=True) + x[k].mean(0, keepdims=True) - x[k].mean()
        np.testing.assert_allclose(proj.xi[..., k], two_way, atol=1e-8)
        np.testing.assert_allclose(proj.xi[..., k], two_way_projection(x[k]), atol=1e-8)


def test_xi_constant_regressor(rng):
    N, T = 10, 8
    X = np.stack([np.full((N, T), 2.5), rng.normal(size=(N, T))])
    panel = PanelData(rng.normal(size=(N, T)), X)
    # a constant lies in the projection span when the factor space contains 1
    Pi = np.outer(rng.normal(size=N), np.ones(T)) + np.outer(rng.normal(size=N), rng.normal(size=T))
    fac = factorize_rank_r(Pi, 2)
    proj = estimate_xi(panel, ModelSpec.linear(), np.zeros(2), fac)
    np.testing.assert_allclose(proj.xi[..., 0], 2.5, atol=1e-7)


def test_xi_normal_equations_and_local_optimality():
    panel, Pi = logit_panel(20, 15, p=2, r=2, seed=21)
    fac = factorize_rank_r(Pi, 2)
    spec = ModelSpec.logit()
    bundle = panel_bundle(panel, spec, np.ones(2), fac)
    proj = estimate_xi(panel, spec, np.ones(2), fac, bundle=bundle)
    s = np.maximum(bundle.d_pi2, 1e-8)
    ratio = bundle.d_theta_pi / s[..., None]
    for k in range(2):
        resid = s * (ratio[..., k] - proj.xi[..., k])
        # normal equations: the weighted residual is orthogonal to every a_i f_t and lambda_i b_t direction
        ga = resid @ fac.F
        gb = resid.T @ fac.Lambda
        scale = np.linalg.norm(s * ratio[..., k]) * np.linalg.norm(fac.F)
        assert np.abs(ga).max() < 1e-6 * scale
        assert np.abs(gb).max() < 1e-6 * scale
        base = projection_objective(ratio[..., k], s, fac.Lambda, fac.F, proj.lambda_sharp[..., k],
                                    proj.f_sharp[..., k])
        for i, c in [(0, 0), (5, 1), (19, 0)]:
            for h in (1e-4, -1e-4):
                a = proj.lambda_sharp[..., k].copy()
                a[i, c] += h
                assert projection_objective(ratio[..., k], s, fac.Lambda, fac.F, a, proj.f_sharp[..., k]) >= base


def test_xi_nonconvergence_raises(rng):
    N, T = 8, 6
    fac = factorize_rank_r(rng.normal(size=(N, 2)) @ rng.normal(size=(T, 2)).T, 2)
    with pytest.raises(NumericalError):
        xi_projection(rng.normal(size=(N, T, 1)), rng.uniform(0.5, 1, (N, T)), fac.Lambda, fac.F,
                      tol=1e-30, max_sweeps=3)


def zero_bundle(N, T, q):
    z = np.zeros((N, T))
    return DerivativeBundle(z, z, z, np.zeros((N, T, q)), np.zeros((N, T, q, q)), np.zeros((N, T, q)),
                            np.zeros((N, T, q)))


def test_zero_bundles_give_zero_components(rng):
    N, T = 6, 5
    fac = factorize_rank_r(rng.normal(size=(N, T)), 1)
    comp = bias_components_from_bundle(zero_bundle(N, T, 2), fac, np.zeros((N, T, 2)), 1)
    np.testing.assert_array_equal(comp.W_hat, 0)
    np.testing.assert_array_equal(comp.B_hat, 0)
    np.testing.assert_array_equal(comp.D_hat, 0)


def test_scripted_two_by_two_formula():
    """Literal re-evaluation of the component formulas on a 2 x 2, r = 1 instance."""
    rng = np.random.default_rng(5)
    N, T, q = 2, 2, 1
    b = DerivativeBundle(
        d_pi=rng.normal(size=(N, T)), d_pi2=rng.uniform(0.5, 1.5, (N, T)), d_pi3=rng.normal(size=(N, T)),
        d_theta=rng.normal(size=(N, T, q)), d_theta_theta=rng.uniform(1, 2, (N, T, q, q)),
        d_theta_pi=rng.normal(size=(N, T, q)), d_theta_pi2=rng.normal(size=(N, T, q)),
    )
    fac = FactorDecomposition(np.array([[1.5], [-0.5]]), np.array([[1.0], [-1.0]]))
    xi = rng.normal(size=(N, T, q))
    L = 1
    comp = bias_components_from_bundle(b, fac, xi, L)
    lam, f = fac.Lambda[:, 0], fac.F[:, 0]
    W = B = D = 0.0
    for i in range(N):
        for t in range(T):
            W += b.d_theta_theta[i, t, 0, 0] - b.d_pi2[i, t] * xi[i, t, 0] ** 2
    W /= N * T
    Dtp = lambda i, t: b.d_theta_pi[i, t, 0] - xi[i, t, 0] * b.d_pi2[i, t]
    Dtp2 = lambda i, t: b.d_theta_pi2[i, t, 0] - xi[i, t, 0] * b.d_pi3[i, t]
    for i in range(N):
        h = sum(b.d_pi2[i, t] * f[t] ** 2 for t in range(T))
        for t in range(T):
            for tau in range(t, min(t + L, T - 1) + 1):
                B += f[t] * f[tau] / h * b.d_pi[i, t] * Dtp(i, tau)
            B -= 0.5 * f[t] ** 2 / h * Dtp2(i, t)
    B /= N
    for t in range(T):
        h = sum(b.d_pi2[i, t] * lam[i] ** 2 for i in range(N))
        for i in range(N):
            D += lam[i] ** 2 / h * (b.d_pi[i, t] * Dtp(i, t) - 0.5 * Dtp2(i, t))
    D /= T
    assert comp.W_hat[0, 0] == pytest.approx(W, abs=1e-12)
    assert comp.B_hat[0] == pytest.approx(B, abs=1e-12)
    assert comp.D_hat[0] == pytest.approx(D, abs=1e-12)


def test_component_invariants_logit():
    panel, Pi = logit_panel(25, 20, p=2, r=2, seed=22)
    fac = factorize_rank_r(Pi, 2)
    spec = ModelSpec.logit()
    bundle = panel_bundle(panel, spec, np.ones(2), fac)
    proj = estimate_xi(panel, spec, np.ones(2), fac, bundle=bundle)
    comp = estimate_bias_components(panel, spec, np.ones(2), fac, bundle=bundle, xi=proj.xi)
    np.testing.assert_allclose(comp.W_hat, comp.W_hat.T, atol=1e-8)
    for H in list(comp.H_lambda) + list(comp.H_f):
        np.testing.assert_allclose(H, H.T, atol=1e-8)
        assert np.linalg.eigvalsh(H)[0] > -1e-8
    direct = (bundle.d_theta_theta.sum((0, 1)) - np.einsum("it,itk,itl->kl", bundle.d_pi2, proj.xi, proj.xi)) / 500
    np.testing.assert_allclose(comp.W_hat, direct, atol=1e-12)
    assert comp.truncation_L == default_truncation(20)
    assert np.all(standard_errors(comp) > 0)


def test_analytic_correction_examples():
    th = np.array([1.0, 2.0])
    res = analytic_correction(th, components(np.eye(2), [0, 0], [0, 0]), 10, 20)
    np.testing.assert_array_equal(res.theta_corrected, th)
    b = np.array([0.3, -0.1])
    res = analytic_correction(th, components(np.eye(2), 20 * b, [0, 0]), 10, 20)
    np.testing.assert_allclose(res.theta_corrected, th - b, atol=1e-15)
    np.testing.assert_allclose(res.se, np.sqrt(1 / 100))
    lo, hi = res.confidence_interval()
    np.testing.assert_allclose(hi - lo, 2 * 1.96 * res.se)


def test_analytic_correction_is_affine(rng):
    W = rng.normal(size=(3, 3))
    W = W @ W.T + 3 * np.eye(3)
    th = rng.normal(size=3)
    B1, B2, D1, D2 = (rng.normal(size=3) for _ in range(4))
    f = lambda B, D: analytic_correction(th, components(W, B, D), 30, 40).theta_corrected
    np.testing.assert_allclose(f(B1 + B2, D1 + D2) - th, (f(B1, D1) - th) + (f(B2, D2) - th), atol=1e-12)
    np.testing.assert_allclose(f(2.5 * B1, 2.5 * D1) - th, 2.5 * (f(B1, D1) - th), atol=1e-12)


def test_singular_w_raises():
    with pytest.raises(InferenceError):
        analytic_correction(np.zeros(2), components([[1, 1], [1, 1]], [0, 0], [0, 0]), 5, 5)


def test_jackknife_arithmetic():
    assert jackknife_combine(1.0, (1.2, 1.2), (1.1, 1.3)) == pytest.approx(0.6)
    th = np.array([0.4, -2.0])
    np.testing.assert_allclose(jackknife_combine(th, (th, th), (th, th)), th)


def test_split_selectors_drop_odd_row():
    sel = split_selectors(7, 6)
    assert sel["N-half 1"].rows == (0, 3) and sel["N-half 2"].rows == (3, 6)
    assert sel["T-half 2"].cols == (3, 6)


def test_jackknife_correction_with_scripted_pipeline():
    panel, _ = linear_panel(8, 6, r=1, seed=1)

    def pipeline(p):
        # a statistic depending only on the subpanel shape
        return np.array([1.0 + 1.0 / p.N + 2.0 / p.T])

    res = jackknife_correction(panel, pipeline)
    # 1 + a/N + b/T is bias-free after the combination
    np.testing.assert_allclose(res.theta_corrected, [1.0], atol=1e-12)
    assert set(res.halves) == {"N-half 1", "N-half 2", "T-half 1", "T-half 2"}
    assert res.method == "jackknife" and np.isnan(res.se).all()


def test_jackknife_odd_warning_and_failing_half():
    panel, _ = linear_panel(7, 6, r=1, seed=1)
    res = jackknife_correction(panel, lambda p: np.array([float(p.N)]))
    assert res.warnings
    np.testing.assert_allclose(res.halves["N-half 1"], [3.0])

    def failing(p):
        if p.T == 3:
            raise NumericalError("boom")
        return np.zeros(1)

    with pytest.raises(JackknifeError) as info:
        jackknife_correction(panel, failing)
    assert info.value.half == "T-half 1"


def test_linear_model_has_no_incidental_bias():
    """Exogenous regressors and independent errors: B and D are centered at zero."""
    B, D = [], []
    for seed in range(50):
        panel, Pi = linear_panel(80, 80, p=1, r=1, seed=100 + seed, noise=1.0)
        spec = ModelSpec.linear()
        init = factorize_rank_r(np.asarray(panel.Y) - np.asarray(panel.X)[0], 1)
        est = refine_iterative(panel, spec, np.ones(1), init, RefineConfig(max_outer=3))
        comp = estimate_bias_components(panel, spec, est.theta, est.factors)
        B.append(comp.B_hat[0])
        D.append(comp.D_hat[0])
    for v in (np.array(B), np.array(D)):
        assert abs(v.mean()) < 3 * v.std(ddof=1) / np.sqrt(v.size)
