"""Second step: localized alternating refinement of (theta, Lambda, F) at a
fixed rank, starting from the first-step estimate.

Each outer iteration minimizes the loss over (Lambda, F) inside balls of
radius sqrt(N) d and sqrt(T) d around the current factors, renormalizes them,
and then minimizes over theta inside a ball of radius d.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .io import register_record
from .losses import make_loss
from .lowrank import FactorDecomposition, align_sign, factorize_rank_r
from .panel import ModelSpec, PanelData

log = logging.getLogger(__name__)

LEVENBERG = 1e-6
RIDGE = 1e-8
MAX_HALVINGS = 30
SWEEP_TOL = 1e-10


@dataclass
class RefineConfig:
    c_radius: float = 2.0
    gamma_nt: float | None = None
    max_outer: int | None = None
    tol_theta: float = 1e-6
    newton_steps_inner: int = 10
    radius: float | None = None  # overrides c * log(N^T) * gamma when set

    def __post_init__(self):
        if not self.c_radius > 0:
            raise ValidationError("c_radius must be positive")
        if self.gamma_nt is not None and not self.gamma_nt > 0:
            raise ValidationError("gamma_nt must be positive")
        if not 0 < self.tol_theta < 1:
            raise ValidationError("tol_theta must lie in (0, 1)")
        if self.max_outer is not None and self.max_outer < 1:
            raise ValidationError("max_outer must be positive")
        if self.newton_steps_inner < 1:
            raise ValidationError("newton_steps_inner must be positive")
        if self.radius is not None and self.radius < 0:
            raise ValidationError("radius must be non-negative")

    def resolve(self, N, T, r):
        """(d, max_outer) for a panel of size N x T at rank r."""
        n = min(N, T)
        gamma = self.gamma_nt if self.gamma_nt is not None else math.sqrt(max(r, 1) * math.log(n) / n)
        d = self.radius if self.radius is not None else self.c_radius * math.log(n) * gamma
        outer = self.max_outer if self.max_outer is not None else math.ceil(2 * math.log(N * T))
        return d, outer


@register_record("second_step")
@dataclass
class SecondStepEstimate:
    theta: np.ndarray
    factors: FactorDecomposition
    theta_path: list
    converged: bool
    outer_iters: int
    radius: float = 0.0
    clip_events: int = 0
    reason: str = ""
    loss: float = float("nan")
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=float))

    @property
    def Pi(self):
        return self.factors.Pi

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "kind"}
        d["factors"] = FactorDecomposition.from_dict(d["factors"])
        d["theta_path"] = [list(map(float, t)) for t in d["theta_path"]]
        return cls(**d)


def _loss_for(panel, spec, loss, draws):
    if loss is not None:
        return loss
    return make_loss(spec.with_bandwidth(panel.N, panel.T), panel.N, panel.T, draws=draws)


def _solve_damped(H, g):
    """Solve (H + mu I) s = g per unit for stacks of r x r systems. mu is 0
    for well-conditioned systems; otherwise the Levenberg damping, raised as
    needed to make the system positive definite."""
    r = H.shape[-1]
    eye = np.eye(r)
    lam_min = np.linalg.eigvalsh(H)[..., 0]
    mu = np.where(lam_min > LEVENBERG, 0.0, LEVENBERG + np.maximum(0.0, -lam_min) * 1.01)
    return np.linalg.solve(H + mu[..., None, None] * eye, g[..., None])[..., 0]


def _newton_block(loss, panel, base, w, A, B, axis):
    """One damped Newton step with per-unit backtracking for the rows of A
    (axis=0: A = Lambda, B = F) or for the rows of B's partner (axis=1: A = F,
    B = Lambda); returns the updated A."""
    Y, X, theta = panel.Y, panel.X, base["theta"]
    Pi = A @ B.T if axis == 0 else B @ A.T
    d1, d2 = loss.pi_derivatives(Y, X, theta, Pi)
    d1, d2 = d1 * w, d2 * w
    if axis == 1:
        d1, d2 = d1.T, d2.T
    g = d1 @ B
    H = np.einsum("it,tk,tl->ikl", d2, B, B)
    step = _solve_damped(H, g)

    def unit_loss(Anew):
        P = Anew @ B.T if axis == 0 else B @ Anew.T
        vals = loss.value(Y, X, theta, P) * w
        return vals.sum(axis=1) if axis == 0 else vals.sum(axis=0)

    f0 = unit_loss(A)
    t = np.ones(A.shape[0])
    cand = A - step
    for _ in range(MAX_HALVINGS):
        f1 = unit_loss(cand)
        bad = f1 > f0
        if not bad.any():
            break
        t = np.where(bad, 0.5 * t, t)
        cand = A - t[:, None] * step
    else:
        cand = np.where((unit_loss(cand) > f0)[:, None], A, cand)
    return cand


def _clip(A, center, radius):
    dev = A - center
    n = np.linalg.norm(dev)
    if n <= radius:
        return A, False
    return center + dev * (radius / n), True


def update_loadings(panel, spec, theta, factors, loss=None, draws=None, sweeps=1):
    """Newton updates of every lambda_i with F held fixed (no ball, no renormalization)."""
    loss = _loss_for(panel, spec, loss, draws)
    w = panel.cell_weights()
    Lam = factors.Lambda.copy()
    for _ in range(sweeps):
        Lam = _newton_block(loss, panel, {"theta": theta}, w, Lam, factors.F, 0)
    return Lam


def update_factors(panel: PanelData, spec: ModelSpec, theta, factors_prev: FactorDecomposition, radii,
                   sweeps=10, loss=None, draws=None, info=None) -> FactorDecomposition:
    """Alternate per-unit Newton sweeps over lambda_i and f_t, project each
    block onto its ball around the previous factors, then renormalize and
    align column signs with the previous F."""
    loss = _loss_for(panel, spec, loss, draws)
    r = factors_prev.r
    if r == 0:
        return factors_prev
    rad_l, rad_f = radii
    if rad_l == 0 and rad_f == 0:
        return factors_prev
    w = panel.cell_weights()
    base = {"theta": np.asarray(theta, dtype=float)}
    Lam, F = factors_prev.Lambda.copy(), factors_prev.F.copy()
    for _ in range(sweeps):
        P_old = Lam @ F.T
        Lam = _newton_block(loss, panel, base, w, Lam, F, 0)
        F = _newton_block(loss, panel, base, w, F, Lam, 1)
        if np.linalg.norm(Lam @ F.T - P_old) <= SWEEP_TOL * max(np.linalg.norm(P_old), 1.0):
            break
    Lam, cl = _clip(Lam, factors_prev.Lambda, rad_l)
    F, cf = _clip(F, factors_prev.F, rad_f)
    if info is not None:
        info["clipped"] = info.get("clipped", 0) + int(cl) + int(cf)
    out = factorize_rank_r(Lam @ F.T, r)
    S = np.diag(align_sign(out.F, factors_prev.F))
    return out.flip(S)


def update_theta(panel: PanelData, spec: ModelSpec, factors: FactorDecomposition, theta_prev, radius,
                 steps=10, loss=None, draws=None, info=None):
    """Damped Newton on theta with Pi fixed, each iterate clipped to the ball
    of the given radius around ``theta_prev``."""
    loss = _loss_for(panel, spec, loss, draws)
    theta_prev = np.asarray(theta_prev, dtype=float)
    q = theta_prev.size
    if q == 0 or radius == 0:
        return theta_prev.copy()
    Pi = factors.Pi
    mask = panel.mask
    n = panel.n_obs

    def objective(th):
        return float(loss.value(panel.Y, panel.X, th, Pi)[mask].sum() / n)

    theta = theta_prev.copy()
    f0 = objective(theta)
    for _ in range(steps):
        g, H = loss.theta_grad_hess(panel.Y, panel.X, theta, Pi, mask)
        g, H = g / n, H / n
        if not np.any(g):
            break
        H = 0.5 * (H + H.T)
        lam_min = np.linalg.eigvalsh(H)[0]
        mu = RIDGE + max(0.0, -lam_min) * 1.01
        step = np.linalg.solve(H + mu * np.eye(q), g)
        t = 1.0
        moved = False
        for _ in range(MAX_HALVINGS):
            cand = theta - t * step
            dev = cand - theta_prev
            nd = np.linalg.norm(dev)
            if nd > radius:
                cand = theta_prev + dev * (radius / nd)
                if info is not None:
                    info["theta_clipped"] = info.get("theta_clipped", 0) + 1
            f1 = objective(cand)
            if f1 <= f0:
                moved = not np.array_equal(cand, theta)
                theta, f0 = cand, f1
                break
            t *= 0.5
        if not moved or np.linalg.norm(t * step) < 1e-14:
            break
    return theta


def refine_iterative(panel: PanelData, spec: ModelSpec, init_theta, init_factors: FactorDecomposition,
                     cfg: RefineConfig | None = None, loss=None, draws=None) -> SecondStepEstimate:
    """Alternate factor and theta updates until ||theta_{m+1} - theta_m|| < tol
    or ``max_outer`` iterations."""
    cfg = cfg or RefineConfig()
    spec = spec.with_bandwidth(panel.N, panel.T)
    loss = _loss_for(panel, spec, loss, draws)
    N, T = panel.N, panel.T
    r = init_factors.r
    d, max_outer = cfg.resolve(N, T, r)
    theta = np.asarray(init_theta, dtype=float).copy()
    factors = init_factors
    path = [theta.copy()]
    if d == 0:
        return SecondStepEstimate(theta, factors, [list(theta)], True, 0, 0.0, 0, "zero radius",
                                  _mean_loss(loss, panel, theta, factors.Pi))
    radii = (math.sqrt(N) * d, math.sqrt(T) * d)
    info = {}
    converged = False
    m = 0
    for m in range(1, max_outer + 1):
        factors = update_factors(panel, spec, theta, factors, radii, cfg.newton_steps_inner, loss, info=info)
        new = update_theta(panel, spec, factors, theta, d, cfg.newton_steps_inner, loss, info=info)
        path.append(new.copy())
        step = np.linalg.norm(new - theta)
        theta = new
        if step < cfg.tol_theta:
            converged = True
            break
    reason = "" if converged else "max_outer reached"
    clips = info.get("clipped", 0) + info.get("theta_clipped", 0)
    if clips:
        log.info("refine: %d ball-clipping events", clips)
    return SecondStepEstimate(
        theta=theta, factors=factors, theta_path=[list(map(float, t)) for t in path], converged=converged,
        outer_iters=m, radius=d, clip_events=clips, reason=reason,
        loss=_mean_loss(loss, panel, theta, factors.Pi),
    )


def _mean_loss(loss, panel, theta, Pi):
    return float(loss.value(panel.Y, panel.X, theta, Pi)[panel.mask].sum() / panel.n_obs)


def init_from_first_step(first, r):
    """(theta, factors) for refinement from a first-step estimate at rank r."""
    return np.asarray(first.theta, dtype=float).copy(), factorize_rank_r(first.Pi, r)
