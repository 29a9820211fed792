"""Rank estimation by singular value thresholding and selection of nu by the
information criterion IC(nu) = L_NT(theta(nu), Pi(nu)) + rho_NT * r(nu)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .admm import AdmmOptions, FirstStepEstimate, estimate_nnr_admm
from .errors import NumericalError, TuningError, ValidationError
from .io import register_record
from .panel import Family, ModelSpec, PanelData

log = logging.getLogger(__name__)

ZERO_SV_REL = 1e-10
GRID_POINTS = 20
GRID_SPAN = (0.01, 2.0)
MAX_RANK = 10
# families whose loss is nonnegative, so that IC >= rho * r; needed for pruning
NONNEGATIVE_LOSS = (Family.LINEAR, Family.LOGIT, Family.BINARY, Family.RCLOGIT)


def estimate_rank(sigma, N, T, nu) -> int:
    """#{s : sigma_s >= NT nu}, after zeroing values below 1e-10 * sigma_1."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.size == 0:
        return 0
    s = np.where(sigma < ZERO_SV_REL * sigma.max(), 0.0, sigma)
    return int(np.count_nonzero((s >= N * T * nu) & (s > 0)))


def parse_penalty(kind):
    """Normalize a penalty tag: 'design1', 'design2', 'custom=V', a number or
    ('custom', V). Returns (label, custom value or None)."""
    if isinstance(kind, (int, float)) and not isinstance(kind, bool):
        return f"custom={float(kind)!r}", float(kind)
    if isinstance(kind, tuple) and len(kind) == 2 and kind[0] == "custom":
        return f"custom={float(kind[1])!r}", float(kind[1])
    if isinstance(kind, str):
        k = kind.strip().lower()
        if k in ("design1", "1"):
            return "design1", None
        if k in ("design2", "2"):
            return "design2", None
        if k.startswith("custom="):
            try:
                v = float(k.split("=", 1)[1])
            except ValueError:
                raise ValidationError(f"bad custom penalty {kind!r}") from None
            return f"custom={v!r}", v
    raise ValidationError(f"unknown penalty kind {kind!r}")


def default_penalty(kind, N, T) -> float:
    """rho_NT. design1: log(N^T)(NvT)/(2NT); design2: loglog(sqrt(NT))/(2 sqrt(NT))."""
    label, custom = parse_penalty(kind)
    if custom is not None:
        return custom
    if label == "design1":
        return 0.5 * math.log(min(N, T)) * max(N, T) / (N * T)
    rt = math.sqrt(N * T)
    if math.log(rt) <= 1.0:
        raise ValidationError(f"loglog(sqrt(NT)) undefined or non-positive for NT = {N * T}")
    return 0.5 * math.log(math.log(rt)) / rt


def default_grid(N, T, n=GRID_POINTS, span=GRID_SPAN) -> np.ndarray:
    """n log-spaced points on span * (sqrt N + sqrt T)/(NT), ascending."""
    scale = (math.sqrt(N) + math.sqrt(T)) / (N * T)
    return np.geomspace(span[0] * scale, span[1] * scale, n)


def default_penalty_kind(spec: ModelSpec) -> str:
    return "design2" if spec.family is Family.RCLOGIT else "design1"


@register_record("tuning")
@dataclass
class TuningResult:
    nu_star: float
    r_hat: int
    ic_path: list
    penalty_kind: str
    penalty: float
    failures: dict = field(default_factory=dict)
    pruned: list = field(default_factory=list)
    estimate: FirstStepEstimate | None = None

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "kind"}
        if d.get("estimate") is not None:
            d["estimate"] = FirstStepEstimate.from_dict(d["estimate"])
        return cls(**d)

    @property
    def grid(self):
        return [row["nu"] for row in self.ic_path]


def admm_solver(opts: AdmmOptions | None = None):
    """Solver handle running ADMM with warm starts from the previous state."""
    base = opts or AdmmOptions()

    def solve(panel, spec, nu, warm):
        o = AdmmOptions(**{**base.__dict__, "init": warm})
        return estimate_nnr_admm(panel, spec, nu, o, return_state=True)

    return solve


def mm_solver(opts=None):
    from .mm import MmOptions, estimate_nnr_mm

    base = opts or MmOptions()

    def solve(panel, spec, nu, warm):
        o = MmOptions(**{**base.__dict__, "init": warm})
        est, _, state = estimate_nnr_mm(panel, spec, nu, o, return_state=True)
        return est, state

    return solve


def default_solver(spec: ModelSpec):
    return mm_solver() if spec.family is Family.RCLOGIT else admm_solver()


def select_nu(panel: PanelData, spec: ModelSpec, nu_grid=None, penalty=None, solver=None,
              warm_start=True, prune=True, max_rank=MAX_RANK) -> TuningResult:
    """Fit every grid point from the largest nu down (warm-starting each fit
    from the previous one) and return the IC minimizer; ties go to the smaller nu.

    With ``prune`` and a nonnegative loss the sweep stops once rho * r(nu)
    alone exceeds the best IC seen: the rank estimate only grows as nu
    shrinks, so no later point can win. Skipped points are listed in
    ``pruned``.

    The sweep also stops after the first fit whose rank estimate exceeds
    ``max_rank`` (None disables this): past that point the fits are
    high-rank and slow, and they are never plausible factor counts.
    """
    N, T = panel.N, panel.T
    grid = default_grid(N, T) if nu_grid is None else np.asarray(nu_grid, dtype=float).ravel()
    if grid.size == 0 or not np.all(grid > 0):
        raise ValidationError("nu grid must be non-empty and positive")
    grid = np.unique(grid)
    if penalty is None:
        penalty = default_penalty_kind(spec)
    label, _ = parse_penalty(penalty)
    rho = default_penalty(penalty, N, T)
    solver = solver or default_solver(spec)
    can_prune = prune and spec.family in NONNEGATIVE_LOSS

    rows, failures, pruned = {}, {}, []
    best = None  # (ic, nu, est)
    warm = None
    desc = grid[::-1]
    for j, nu in enumerate(desc):
        try:
            est, state = solver(panel, spec, float(nu), warm if warm_start else None)
        except NumericalError as exc:
            failures[repr(float(nu))] = str(exc)
            log.warning("solver failed at nu=%g: %s", nu, exc)
            continue
        if warm_start:
            warm = state
        r = estimate_rank(est.singular_values, N, T, nu)
        ic = est.loss + rho * r
        rows[float(nu)] = {
            "nu": float(nu), "ic": float(ic), "r_hat": r, "objective": float(est.objective),
            "loss": float(est.loss), "iters": int(est.iters), "converged": bool(est.converged),
        }
        over_cap = max_rank is not None and r > max_rank
        if not over_cap and (best is None or ic <= best[0]):
            best = (ic, float(nu), est, r)
        if over_cap or (can_prune and best is not None and rho * r > best[0]):
            pruned = [float(v) for v in desc[j + 1:]]
            break
    if best is None:
        if rows:
            raise TuningError(f"every fitted grid point has rank above max_rank={max_rank}", failures)
        raise TuningError("every solver run failed", failures)
    path = [rows[k] for k in sorted(rows)]
    return TuningResult(
        nu_star=best[1], r_hat=best[3], ic_path=path, penalty_kind=label, penalty=rho,
        failures=failures, pruned=sorted(pruned), estimate=best[2],
    )
