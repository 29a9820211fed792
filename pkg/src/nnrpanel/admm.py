"""First-step nuclear-norm-regularized estimation for single-index losses by
ADMM on the split  V = X'theta + Z,  Z = Pi.

The scaled augmented Lagrangian (all terms divided by NT) is

    sum w l(Y, V) + nu ||Pi||_* NT + eta/2 ||V - X theta - Z + U_p||^2
                                    + eta/2 ||Z - Pi + U_v||^2

and one sweep updates V, theta, Pi, Z and the scaled duals in that order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError, UnsupportedFamilyError, ValidationError
from .io import register_record
from .losses import aggregate_loss, make_loss
from .lowrank import singular_values, soft_threshold
from .panel import Family, ModelSpec, PanelData

log = logging.getLogger(__name__)

RIDGE = 1e-10
DIVERGENCE_FACTOR = 1e3


@register_record("first_step")
@dataclass
class FirstStepEstimate:
    theta: np.ndarray
    Pi: np.ndarray
    nu: float
    objective: float
    primal_res: float
    dual_res: float
    iters: int
    converged: bool
    loss: float = float("nan")
    family: str = ""
    solver: str = "admm"
    # RC logit only: Cholesky factor of the coefficient covariance
    sigma_chol: np.ndarray | None = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        self.Pi = np.asarray(self.Pi, dtype=float)
        if self.sigma_chol is not None:
            self.sigma_chol = np.atleast_2d(np.asarray(self.sigma_chol, dtype=float))

    @property
    def singular_values(self):
        return singular_values(self.Pi)

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "kind"}
        if len(d.get("theta", [])) == 0:
            d["theta"] = np.zeros(0)
        return cls(**d)


@dataclass
class AdmmOptions:
    eta: float = 1.0
    tol: float = 1e-6
    max_iter: int = 5000
    adaptive_eta: bool = True
    # "gradient": one backtracked gradient step on the local V problem (the
    # textbook ADMM step); "newton": one safeguarded Newton step. Linear always uses
    # the exact minimizer.
    v_update: str = "gradient"
    init: object = None

    def __post_init__(self):
        if not self.eta > 0:
            raise ValidationError("eta must be positive")
        if self.v_update not in ("gradient", "newton"):
            raise ValidationError("v_update must be 'gradient' or 'newton'")


@dataclass
class AdmmState:
    V: np.ndarray
    Z: np.ndarray
    Pi: np.ndarray
    U_p: np.ndarray
    U_v: np.ndarray
    theta: np.ndarray
    eta: float = 1.0
    iter: int = 0
    # singular values of Z + U_v before the last threshold, and that threshold
    pre_sv: np.ndarray | None = None
    threshold: float = 0.0
    ridge_used: bool = False

    def copy(self):
        return replace(
            self,
            **{k: getattr(self, k).copy() for k in ("V", "Z", "Pi", "U_p", "U_v", "theta")},
        )


def _xtx(panel):
    X = panel.X.reshape(panel.p, -1)
    return X @ X.T


def _solve_theta(panel, A, G=None):
    """Least squares of A on X over all cells; returns (theta, ridge_used)."""
    p = panel.p
    if p == 0:
        return np.zeros(0), False
    X = panel.X.reshape(p, -1)
    if G is None:
        G = X @ X.T
    rhs = X @ A.reshape(-1)
    ridge = False
    if np.linalg.cond(G) > 1e12:
        G = G + RIDGE * np.eye(p)
        ridge = True
    return np.linalg.solve(G, rhs), ridge


def initial_state(panel: PanelData, spec: ModelSpec, nu, eta=1.0, init=None) -> AdmmState:
    """theta = 0 with Pi from the soft-thresholded outcome (linear) or zeros;
    ``init`` may be a FirstStepEstimate or AdmmState to warm-start from."""
    N, T = panel.N, panel.T
    if isinstance(init, AdmmState):
        state = init.copy()
        state.iter = 0
        return state
    if init is not None:
        theta = np.asarray(init.theta, dtype=float).copy()
        Pi = np.asarray(init.Pi, dtype=float).copy()
    else:
        theta = np.zeros(panel.p)
        if spec.family is Family.LINEAR:
            Pi = soft_threshold(np.where(panel.mask, panel.Y, 0.0), N * T * nu / eta)
        else:
            Pi = np.zeros((N, T))
    V = panel.index(theta) + Pi
    zeros = np.zeros((N, T))
    return AdmmState(V=V, Z=Pi.copy(), Pi=Pi, U_p=zeros, U_v=zeros.copy(), theta=theta, eta=float(eta))


def _v_update(loss, panel, w, V, a, eta, mode):
    Y = panel.Y
    if loss.family is Family.LINEAR:
        return (w * Y + eta * a) / (w + eta)

    def phi(v):
        return w * loss.index_loss(Y, v) + 0.5 * eta * (v - a) ** 2

    d1, d2, _ = loss.index_derivs(Y, V)
    grad = w * d1 + eta * (V - a)
    if mode == "newton":
        step = grad / np.maximum(w * d2 + eta, eta)
    else:
        step = grad
    f0 = phi(V)
    t = np.ones_like(V)
    newV = V - step
    for _ in range(30):
        bad = phi(newV) > f0 + 1e-15 * np.abs(f0)
        if not bad.any():
            break
        t = np.where(bad, 0.5 * t, t)
        newV = V - t * step
    return newV


def admm_step(state: AdmmState, panel: PanelData, spec: ModelSpec, nu, loss=None, v_update="gradient", G=None):
    """One sweep of the five updates; returns a new state."""
    if loss is None:
        loss = make_loss(spec, panel.N, panel.T)
    N, T = panel.N, panel.T
    eta = state.eta
    w = panel.cell_weights()
    Xt = panel.index(state.theta)
    a = Xt + state.Z - state.U_p
    V = _v_update(loss, panel, w, state.V, a, eta, v_update)
    theta, ridge = _solve_theta(panel, V - state.Z + state.U_p, G)
    Xt = panel.index(theta)
    thr = N * T * nu / eta
    Pi, sv = soft_threshold(state.Z + state.U_v, thr, return_sv=True)
    Z = 0.5 * (V - Xt + state.U_p + Pi - state.U_v)
    U_p = state.U_p + V - Xt - Z
    U_v = state.U_v + Z - Pi
    return AdmmState(
        V=V, Z=Z, Pi=Pi, U_p=U_p, U_v=U_v, theta=theta, eta=eta, iter=state.iter + 1,
        pre_sv=sv, threshold=thr, ridge_used=ridge,
    )


def residuals(state_prev: AdmmState, state_next: AdmmState, panel: PanelData | None = None, X=None):
    """(primal, dual) residuals scaled by 1/sqrt(NT)."""
    s = state_next
    N, T = s.V.shape
    if panel is not None:
        Xt = panel.index(s.theta)
    elif X is not None and len(s.theta):
        Xt = np.tensordot(s.theta, X, axes=1)
    else:
        Xt = 0.0
    rt = np.sqrt(N * T)
    primal = (np.linalg.norm(s.V - Xt - s.Z) + np.linalg.norm(s.Z - s.Pi)) / rt
    dual = s.eta * np.linalg.norm(s.Z - state_prev.Z) / rt
    return float(primal), float(dual)


def penalized_objective(panel, spec, theta, Pi, nu, loss=None):
    return aggregate_loss(spec, panel, theta, Pi, loss=loss) + nu * float(singular_values(Pi).sum())


def estimate_nnr_admm(panel: PanelData, spec: ModelSpec, nu, opts: AdmmOptions | None = None,
                      return_state=False, trace=None):
    """Minimize L_NT(theta, Pi) + nu ||Pi||_* by ADMM.

    ``trace``, if a list, receives the penalized objective after every sweep.
    """
    opts = opts or AdmmOptions()
    if not spec.single_index:
        raise UnsupportedFamilyError(f"ADMM handles single-index families only, not {spec.family.value}")
    if not nu > 0:
        raise ValidationError("nu must be positive")
    spec = spec.with_bandwidth(panel.N, panel.T)
    loss = make_loss(spec, panel.N, panel.T)
    G = _xtx(panel) if panel.p else None
    state = initial_state(panel, spec, nu, opts.eta, opts.init)
    obj0 = penalized_objective(panel, spec, state.theta, state.Pi, nu, loss)
    limit = DIVERGENCE_FACTOR * max(abs(obj0), 1e-12)
    warnings = []
    primal = dual = np.inf
    converged = False
    for k in range(1, opts.max_iter + 1):
        new = admm_step(state, panel, spec, nu, loss, opts.v_update, G)
        primal, dual = residuals(state, new, panel)
        if new.ridge_used and "ridge" not in warnings:
            warnings.append("ridge")
        obj = penalized_objective(panel, spec, new.theta, new.Pi, nu, loss)
        if not np.isfinite(obj) or obj > limit:
            raise DivergenceError(f"ADMM diverged (objective {obj:.3g})", iteration=k)
        if trace is not None:
            trace.append(obj)
        state = new
        if max(primal, dual) < opts.tol:
            converged = True
            break
        if opts.adaptive_eta:
            if primal > 10 * dual:
                state.eta *= 2.0
                state.U_p /= 2.0
                state.U_v /= 2.0
            elif dual > 10 * primal:
                state.eta /= 2.0
                state.U_p *= 2.0
                state.U_v *= 2.0
    if not converged:
        warnings.append("max_iter")
        log.info("ADMM stopped at max_iter=%d (primal %.2e, dual %.2e)", opts.max_iter, primal, dual)
    result = FirstStepEstimate(
        theta=state.theta.copy(),
        Pi=state.Pi.copy(),
        nu=float(nu),
        objective=penalized_objective(panel, spec, state.theta, state.Pi, nu, loss),
        primal_res=primal,
        dual_res=dual,
        iters=state.iter,
        converged=converged,
        loss=aggregate_loss(spec, panel, state.theta, state.Pi, loss=loss),
        family=spec.family.value,
        solver="admm",
        warnings=warnings,
    )
    if return_state:
        return result, state
    return result
