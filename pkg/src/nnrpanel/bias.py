"""Incidental-parameter bias correction and inference for the second-step
estimator: the weighted projection Xi, the sample analogs (W, B, D), the
analytic correction and the split-panel jackknife.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, InferenceError, JackknifeError, NnrError
from .io import register_record
from .losses import DerivativeBundle, make_loss
from .lowrank import FactorDecomposition
from .panel import PanelData, SubpanelSelector, subpanel

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-8
XI_TOL = 1e-8
XI_MAX_SWEEPS = 500
H_RIDGE = 1e-8
COND_MAX = 1e10


@dataclass
class XiProjection:
    xi: np.ndarray  # (N, T, q)
    lambda_sharp: np.ndarray  # (N, r, q)
    f_sharp: np.ndarray  # (T, r, q)
    wls_residual_norm: float
    sweeps: int = 0


@register_record("bias_components")
@dataclass
class BiasComponents:
    W_hat: np.ndarray
    B_hat: np.ndarray
    D_hat: np.ndarray
    H_lambda: np.ndarray  # (N, r, r)
    H_f: np.ndarray  # (T, r, r)
    truncation_L: int
    n_obs: int = 0
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.W_hat = np.atleast_2d(np.asarray(self.W_hat, dtype=float))
        self.B_hat = np.atleast_1d(np.asarray(self.B_hat, dtype=float))
        self.D_hat = np.atleast_1d(np.asarray(self.D_hat, dtype=float))
        self.H_lambda = np.asarray(self.H_lambda, dtype=float)
        self.H_f = np.asarray(self.H_f, dtype=float)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k != "kind"})


@register_record("bias_corrected")
@dataclass
class BiasCorrectedResult:
    theta_corrected: np.ndarray
    method: str
    se: np.ndarray
    components: BiasComponents | None = None
    theta_uncorrected: np.ndarray | None = None
    halves: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.theta_corrected = np.atleast_1d(np.asarray(self.theta_corrected, dtype=float))
        self.se = np.atleast_1d(np.asarray(self.se, dtype=float))
        if self.theta_uncorrected is not None:
            self.theta_uncorrected = np.atleast_1d(np.asarray(self.theta_uncorrected, dtype=float))

    def confidence_interval(self, z=1.96):
        return self.theta_corrected - z * self.se, self.theta_corrected + z * self.se

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "kind"}
        if d.get("components") is not None:
            d["components"] = BiasComponents.from_dict(d["components"])
        return cls(**d)


def default_truncation(T) -> int:
    return int(math.floor(T**0.25))


def panel_bundle(panel: PanelData, spec, theta, factors: FactorDecomposition, loss=None, draws=None):
    """Derivative bundle at every cell, zeroed at unobserved cells."""
    if loss is None:
        loss = make_loss(spec.with_bandwidth(panel.N, panel.T), panel.N, panel.T, draws=draws)
    der = loss.derivatives(panel.Y, panel.X, np.asarray(theta, float), factors.Pi)
    return der.masked(panel.mask)


def _weights(bundle, mask=None):
    s = np.maximum(bundle.d_pi2, WEIGHT_FLOOR)
    if mask is not None:
        s = s * mask
    return s


def _batched_solve(H, rhs):
    """Solve per-unit r x r systems, ridging singular ones."""
    try:
        return np.linalg.solve(H, rhs[..., None])[..., 0], False
    except np.linalg.LinAlgError:
        r = H.shape[-1]
        return np.linalg.solve(H + H_RIDGE * np.eye(r), rhs[..., None])[..., 0], True


def xi_projection(target, s, Lambda, F, tol=XI_TOL, max_sweeps=XI_MAX_SWEEPS):
    """Weighted projection of ``target`` (N, T, q) onto {a_i'f_t + lambda_i'b_t}
    with weights s (N, T) by alternating weighted least squares.

    Returns (xi, a, b, sweeps) with a (N, r, q) and b (T, r, q).
    """
    N, T, q = target.shape
    r = Lambda.shape[1]
    if r == 0:
        return np.zeros_like(target), np.zeros((N, 0, q)), np.zeros((T, 0, q)), 0
    Ha = np.einsum("it,tk,tl->ikl", s, F, F)
    Hb = np.einsum("it,ik,il->tkl", s, Lambda, Lambda)
    ridge_a = H_RIDGE * np.eye(r) * (np.linalg.cond(Ha) > 1e12)[:, None, None]
    ridge_b = H_RIDGE * np.eye(r) * (np.linalg.cond(Hb) > 1e12)[:, None, None]
    Ha_inv = np.linalg.inv(Ha + ridge_a)
    Hb_inv = np.linalg.inv(Hb + ridge_b)
    a = np.zeros((N, r, q))
    b = np.zeros((T, r, q))
    xi = np.zeros_like(target)
    trace = []
    for sweep in range(1, max_sweeps + 1):
        lb = np.einsum("ik,tkq->itq", Lambda, b)
        rhs = np.einsum("it,tk,itq->ikq", s, F, target - lb)
        a = np.einsum("ikl,ilq->ikq", Ha_inv, rhs)
        af = np.einsum("ikq,tk->itq", a, F)
        rhs = np.einsum("it,ik,itq->tkq", s, Lambda, target - af)
        b = np.einsum("tkl,tlq->tkq", Hb_inv, rhs)
        new = af + np.einsum("ik,tkq->itq", Lambda, b)
        delta = np.linalg.norm(new - xi) / max(np.linalg.norm(new), 1e-300)
        trace.append(float(delta))
        xi = new
        if delta < tol:
            return xi, a, b, sweep
    raise ConvergenceError(f"Xi projection did not converge in {max_sweeps} sweeps", trace=trace)


def estimate_xi(panel: PanelData, spec, theta, factors: FactorDecomposition, bundle=None, loss=None,
                draws=None) -> XiProjection:
    """Xi_it,k = lambda#_ik'f_t + lambda_i'f#_tk, the weighted projection of
    d_theta_k_pi / d_pi2 with weights d_pi2 (floored at 1e-8)."""
    if bundle is None:
        bundle = panel_bundle(panel, spec, theta, factors, loss, draws)
    mask = panel.mask if panel is not None else None
    s = _weights(bundle, mask)
    ratio = bundle.d_theta_pi / np.maximum(bundle.d_pi2, WEIGHT_FLOOR)[..., None]
    xi, a, b, sweeps = xi_projection(ratio, s, factors.Lambda, factors.F)
    resid = float(np.sqrt(np.sum(s[..., None] * (ratio - xi) ** 2)))
    return XiProjection(xi, a, b, resid, sweeps)


def bias_components_from_bundle(bundle: DerivativeBundle, factors: FactorDecomposition, xi, truncation_L,
                                mask=None) -> BiasComponents:
    """Sample analogs of (W, B, D) from a derivative bundle and Xi.

    W = (1/n) sum [d_tt - d_pi2 Xi Xi']
    B = (1/N) sum_i sum_t [ sum_{tau=t}^{t+L} f_t'H_i^-1 f_tau d_pi_it Dtp_i,tau
                            - 1/2 f_t'H_i^-1 f_t Dtp2_it ]
    D = (1/T) sum_t sum_i [ lambda_i'H_t^-1 lambda_i (d_pi_it Dtp_it - 1/2 Dtp2_it) ]
    with Dtp = d_theta_pi - Xi d_pi2 and Dtp2 = d_theta_pi2 - Xi d_pi3.
    """
    N, T = bundle.d_pi.shape
    if mask is None:
        mask = np.ones((N, T), dtype=bool)
    n = int(mask.sum())
    Lam, F = factors.Lambda, factors.F
    r = F.shape[1]
    warnings = []
    s = _weights(bundle, mask)
    W = (bundle.d_theta_theta.sum((0, 1)) - np.einsum("it,itk,itl->kl", bundle.d_pi2, xi, xi)) / n
    W = 0.5 * (W + W.T)
    Dtp = bundle.d_theta_pi - xi * bundle.d_pi2[..., None]
    Dtp2 = bundle.d_theta_pi2 - xi * bundle.d_pi3[..., None]
    q = W.shape[0]
    H_l = np.einsum("it,tk,tl->ikl", s, F, F)
    H_f = np.einsum("it,ik,il->tkl", s, Lam, Lam)
    if r == 0:
        return BiasComponents(W, np.zeros(q), np.zeros(q), H_l, H_f, int(truncation_L), n, warnings)
    eye = np.eye(r)
    sing_l = np.linalg.cond(H_l) > 1e12
    sing_f = np.linalg.cond(H_f) > 1e12
    if sing_l.any() or sing_f.any():
        warnings.append("ridge_H")
    Hl_inv = np.linalg.inv(H_l + H_RIDGE * eye * sing_l[:, None, None])
    Hf_inv = np.linalg.inv(H_f + H_RIDGE * eye * sing_f[:, None, None])
    L = int(min(truncation_L, T - 1))
    B = np.zeros(q)
    for lag in range(L + 1):
        # K[i, t] = f_t' H_i^-1 f_{t+lag}
        K = np.einsum("tk,ikl,tl->it", F[: T - lag], Hl_inv, F[lag:])
        B += np.einsum("it,itq->q", K * bundle.d_pi[:, : T - lag], Dtp[:, lag:])
    K0 = np.einsum("tk,ikl,tl->it", F, Hl_inv, F)
    B -= 0.5 * np.einsum("it,itq->q", K0, Dtp2)
    B /= N
    M = np.einsum("ik,tkl,il->it", Lam, Hf_inv, Lam)
    D = np.einsum("it,itq->q", M, bundle.d_pi[..., None] * Dtp - 0.5 * Dtp2) / T
    return BiasComponents(W, B, D, H_l, H_f, int(truncation_L), n, warnings)


def estimate_bias_components(panel: PanelData, spec, theta, factors: FactorDecomposition, truncation_L=None,
                             loss=None, draws=None, bundle=None, xi=None) -> BiasComponents:
    if truncation_L is None:
        truncation_L = default_truncation(panel.T)
    if bundle is None:
        bundle = panel_bundle(panel, spec, theta, factors, loss, draws)
    if xi is None:
        xi = estimate_xi(panel, spec, theta, factors, bundle=bundle).xi
    return bias_components_from_bundle(bundle, factors, xi, truncation_L, panel.mask)


def _inverse(W):
    W = np.atleast_2d(W)
    if W.size == 0:
        return W
    cond = np.linalg.cond(W)
    if not np.isfinite(cond) or cond >= COND_MAX:
        raise InferenceError(f"W is singular or ill-conditioned (condition number {cond:.3g})")
    return np.linalg.inv(W)


def standard_errors(components: BiasComponents, n_obs=None):
    Winv = _inverse(components.W_hat)
    n = n_obs or components.n_obs
    return np.sqrt(np.maximum(np.diag(Winv), 0.0) / n)


def analytic_correction(theta, components: BiasComponents, N, T) -> BiasCorrectedResult:
    """theta - W^-1 B / T - W^-1 D / N, with se_k = sqrt([W^-1]_kk / NT)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    Winv = _inverse(components.W_hat)
    corrected = theta - Winv @ components.B_hat / T - Winv @ components.D_hat / N
    n = components.n_obs or N * T
    se = np.sqrt(np.maximum(np.diag(Winv), 0.0) / n)
    return BiasCorrectedResult(corrected, "analytic", se, components, theta, warnings=list(components.warnings))


def jackknife_combine(theta, n_halves, t_halves):
    """3 theta - (theta_N1 + theta_N2)/2 - (theta_T1 + theta_T2)/2."""
    theta = np.asarray(theta, dtype=float)
    n1, n2 = (np.asarray(h, dtype=float) for h in n_halves)
    t1, t2 = (np.asarray(h, dtype=float) for h in t_halves)
    return 3.0 * theta - 0.5 * (n1 + n2) - 0.5 * (t1 + t2)


def split_selectors(N, T):
    """The four half-panel selectors, after dropping a trailing row/column when odd."""
    N2, T2 = N - N % 2, T - T % 2
    h, k = N2 // 2, T2 // 2
    return {
        "N-half 1": SubpanelSelector((0, h), (0, T2)),
        "N-half 2": SubpanelSelector((h, N2), (0, T2)),
        "T-half 1": SubpanelSelector((0, N2), (0, k)),
        "T-half 2": SubpanelSelector((0, N2), (k, T2)),
    }


def jackknife_correction(panel: PanelData, pipeline, theta_full=None, components: BiasComponents | None = None,
                         ) -> BiasCorrectedResult:
    """Split-panel jackknife. ``pipeline(panel) -> theta`` runs the full
    estimation on a subpanel. Standard errors come from the full-sample W
    when ``components`` is given."""
    warnings = []
    if panel.N % 2 or panel.T % 2:
        warnings.append("odd dimension: dropped last row/column for the halves")
        log.warning("jackknife: odd N or T, dropping the last row/column")
    if theta_full is None:
        try:
            theta_full = pipeline(panel)
        except NnrError as exc:
            raise JackknifeError(f"full-sample estimation failed: {exc}", half="full") from exc
    halves = {}
    for name, sel in split_selectors(panel.N, panel.T).items():
        try:
            halves[name] = np.asarray(pipeline(subpanel(panel, sel)), dtype=float)
        except NnrError as exc:
            raise JackknifeError(f"subpanel estimation failed: {exc}", half=name) from exc
    corrected = jackknife_combine(
        theta_full, (halves["N-half 1"], halves["N-half 2"]), (halves["T-half 1"], halves["T-half 2"])
    )
    if components is not None:
        se = standard_errors(components)
    else:
        se = np.full(corrected.shape, np.nan)
    return BiasCorrectedResult(corrected, "jackknife", se, components, np.asarray(theta_full, float),
                               halves={k: v.tolist() for k, v in halves.items()}, warnings=warnings)
