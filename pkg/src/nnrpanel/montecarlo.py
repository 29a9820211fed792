"""Simulation designs, the per-replication estimation pipeline and summary
metrics for the Monte Carlo tables.

Design 1 is a binary logit with fixed slopes, Design 2 a random-coefficient
logit with beta_it ~ N(theta0, 0.3 I). Covariates are either iid (DGP 1) or
stationary AR(1) in t (DGP 2), shifted by rho (lambda_ik^2 + f_tk^2) for
k = 1, 2 so that they correlate with the fixed effects.
"""

from __future__ import annotations

import csv
import io as _io
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .admm import AdmmOptions
from .bias import analytic_correction, estimate_bias_components, jackknife_correction
from .errors import NnrError, ValidationError
from .io import register_record
from .losses import RcLogitLoss, standard_draws
from .mm import MmOptions
from .panel import Family, ModelSpec, PanelData
from .refine import RefineConfig, init_from_first_step, refine_iterative
from .tuning import admm_solver, default_grid, estimate_rank, mm_solver, select_nu

log = logging.getLogger(__name__)


@dataclass
class DesignConfig:
    design: int = 1
    dgp: int = 1
    N: int = 100
    T: int = 100
    rho: float = 0.2
    theta0: tuple = (1.0, 1.0, 1.0)
    sigma0_scale: float = 0.3
    ar_coef: float = 0.2
    ar_sigma: float = 2.0
    seed: int = 0
    n_factors: int = 2  # 0 gives a pure-noise panel (Pi0 = 0)

    def __post_init__(self):
        self.design, self.dgp = int(self.design), int(self.dgp)
        if self.design not in (1, 2):
            raise ValidationError("design must be 1 or 2")
        if self.dgp not in (1, 2):
            raise ValidationError("dgp must be 1 or 2")
        if self.N < 2 or self.T < 2:
            raise ValidationError("N and T must be at least 2")
        if not abs(self.ar_coef) < 1:
            raise ValidationError("ar_coef must lie in (-1, 1)")
        if self.n_factors not in (0, 2):
            raise ValidationError("n_factors must be 0 or 2")
        self.theta0 = tuple(float(v) for v in self.theta0)

    @property
    def p(self):
        return len(self.theta0)


@dataclass
class TruthRecord:
    theta0: np.ndarray
    Lambda0: np.ndarray
    F0: np.ndarray
    Pi0: np.ndarray
    beta_its: np.ndarray | None = None


def _rng(seed, replication=None):
    entropy = [int(seed)] if replication is None else [int(seed), int(replication)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def generate(config: DesignConfig, replication=None):
    """Draw one panel. Each (seed, replication) pair has its own counter-based
    stream, so a replication can be regenerated in isolation."""
    rng = _rng(config.seed, replication)
    N, T, p = config.N, config.T, config.p
    theta0 = np.asarray(config.theta0)
    r = config.n_factors
    lam = rng.normal(1.0, 1.0, (N, 2))
    f = rng.normal(0.0, 1.0, (T, 2))
    if config.dgp == 1:
        xt = rng.normal(0.0, 2.0, (p, N, T))
    else:
        a, s = config.ar_coef, config.ar_sigma
        u = rng.normal(0.0, s, (p, N, T))
        xt = np.empty((p, N, T))
        xt[:, :, 0] = u[:, :, 0] / math.sqrt(1 - a * a)
        for t in range(1, T):
            xt[:, :, t] = a * xt[:, :, t - 1] + u[:, :, t]
    if r == 0:
        lam, f = np.zeros((N, 0)), np.zeros((T, 0))
    Pi0 = lam @ f.T
    X = xt.copy()
    for k in range(min(r, p)):
        X[k] += config.rho * (lam[:, k][:, None] ** 2 + f[:, k][None, :] ** 2)
    beta = None
    if config.design == 2:
        beta = theta0[:, None, None] + math.sqrt(config.sigma0_scale) * rng.normal(size=(p, N, T))
        index = (X * beta).sum(0)
        beta = np.moveaxis(beta, 0, -1)
    else:
        index = np.tensordot(theta0, X, axes=1)
    eps = rng.logistic(size=(N, T))
    Y = (index + Pi0 - eps >= 0).astype(float)
    truth = TruthRecord(theta0=theta0, Lambda0=lam, F0=f, Pi0=Pi0, beta_its=beta)
    return PanelData(Y, X), truth


def rmse(estimates, theta0) -> float:
    """100 * sqrt(mean ||theta_s - theta0||^2) / ||theta0||."""
    theta0 = np.asarray(theta0, dtype=float)
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    if est.size == 0:
        raise ValidationError("rmse needs at least one estimate")
    scale = np.linalg.norm(theta0)
    if scale == 0:
        raise ValidationError("rmse is undefined for theta0 = 0")
    return float(100.0 * math.sqrt(np.mean(np.sum((est - theta0) ** 2, axis=1))) / scale)


@dataclass
class PipelineOptions:
    """Settings for one replication. ``bias`` is any of 'abc', 'jbc' joined
    by '+' (or 'none'); the radius constant goes to the refine step."""
    bias: str = "none"
    n_grid: int = 20
    penalty: str | None = None
    radius_c: float = 2.0
    trunc_L: int | None = None
    draws: int = 200
    mm_curvature: float = 0.25
    refine: bool = True
    rank: int | None = None  # fixed rank for the second step; None uses the IC estimate

    @property
    def methods(self):
        b = (self.bias or "none").lower()
        return set() if b == "none" else set(b.split("+"))


def _spec_for(config: DesignConfig, opts: PipelineOptions):
    return ModelSpec.logit() if config.design == 1 else ModelSpec.rclogit(draws=opts.draws)


def solver_for(spec: ModelSpec, opts: PipelineOptions, seed=0):
    """First-step solver handle: ADMM for single-index families, frozen-draw
    MM with Newton theta steps for the random-coefficient logit."""
    if spec.family is not Family.RCLOGIT:
        return admm_solver(AdmmOptions())
    return mm_solver(MmOptions(mode="frozen", theta_step="newton", curvature=opts.mm_curvature, seed=seed))


def second_step_loss(panel: PanelData, spec: ModelSpec, seed=0):
    """Loss object for refinement; the RC logit reuses the first step's draws."""
    if spec.family is not Family.RCLOGIT:
        return None
    return RcLogitLoss(standard_draws(panel.N, panel.T, spec.draws, panel.p, [seed]))


def estimate_panel(panel: PanelData, spec: ModelSpec, opts: PipelineOptions, seed=0, nu=None, rank=None):
    """Tune (or use the given nu), run the first step, fix the rank and refine.
    Returns (tuning or None, first step, second step or None, loss)."""
    solver = solver_for(spec, opts, seed)
    tuning = None
    if nu is None:
        grid = default_grid(panel.N, panel.T, opts.n_grid)
        tuning = select_nu(panel, spec, grid, opts.penalty, solver)
        first = tuning.estimate
        r = tuning.r_hat if rank is None else rank
    else:
        first, _ = solver(panel, spec, nu, None)
        r = estimate_rank(first.singular_values, panel.N, panel.T, nu) if rank is None else rank
    if not opts.refine:
        return tuning, first, None, None
    theta, factors = init_from_first_step(first, r)
    loss = second_step_loss(panel, spec, seed)
    second = refine_iterative(panel, spec, theta, factors, RefineConfig(c_radius=opts.radius_c), loss=loss)
    return tuning, first, second, loss


def half_panel_pipeline(spec, opts, nu_full, N, T, rank, seed=0):
    """Estimator for the jackknife halves: the first step at the full-sample nu
    rescaled to the half's grid, then refinement at the full-sample rank."""
    g_full = _grid_scale(N, T)

    def pipeline(sub):
        nu = nu_full * _grid_scale(sub.N, sub.T) / g_full
        return estimate_panel(sub, spec, opts, seed, nu=nu, rank=rank)[2].theta

    return pipeline


def run_one(config: DesignConfig, s: int, opts: PipelineOptions) -> dict:
    """One replication; returns a flat record (failures carry 'error')."""
    t0 = time.perf_counter()
    rec = {"seed": int(s), "error": None}
    try:
        panel, truth = generate(config, s)
        spec = _spec_for(config, opts)
        p = config.p
        mm_seed = int(s)
        tuning, first, second, loss = estimate_panel(panel, spec, opts, mm_seed, rank=opts.rank)
        rec.update(nu_star=tuning.nu_star, r_hat=int(tuning.r_hat), theta_first=first.theta[:p].tolist())
        if second is not None:
            rec.update(
                theta_second=second.theta[:p].tolist(),
                refine_converged=bool(second.converged),
                outer_iters=int(second.outer_iters),
                normalization=second.factors.normalization_error(),
            )
            methods = opts.methods
            if methods:
                comps = estimate_bias_components(panel, spec, second.theta, second.factors, opts.trunc_L, loss=loss)
                if "abc" in methods:
                    abc = analytic_correction(second.theta, comps, panel.N, panel.T)
                    rec.update(theta_abc=abc.theta_corrected[:p].tolist(), se_abc=abc.se[:p].tolist())
                if "jbc" in methods:
                    pipeline = half_panel_pipeline(spec, opts, tuning.nu_star, panel.N, panel.T, second.factors.r,
                                                   mm_seed)
                    jbc = jackknife_correction(panel, pipeline, second.theta, comps)
                    rec.update(theta_jbc=jbc.theta_corrected[:p].tolist())
    except NnrError as exc:
        rec["error"] = f"{type(exc).__name__}: {exc}"
        log.warning("replication %d failed: %s", s, exc)
    log.info("replication %d done in %.1fs", s, time.perf_counter() - t0)
    return rec


def _grid_scale(N, T):
    return (math.sqrt(N) + math.sqrt(T)) / (N * T)


@register_record("mc_summary")
@dataclass
class McSummary:
    N: int
    T: int
    design: int
    dgp: int
    replications: int
    failures: int
    rmse_first: float
    rmse_second: float
    mean_r_hat: float
    rmse_abc: float = float("nan")
    rmse_jbc: float = float("nan")
    per_seed: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k != "kind"})

    def table_row(self):
        return {
            "N": self.N, "T": self.T, "rmse_first": f"{self.rmse_first:.4f}",
            "mean_r_hat": f"{self.mean_r_hat:.4f}", "rmse_second": f"{self.rmse_second:.4f}",
        }


def _col(records, key):
    rows = [r[key] for r in records if r.get(key) is not None]
    return rows


def summarize(config: DesignConfig, records) -> McSummary:
    """Aggregate replication records; failed seeds are counted and excluded."""
    records = sorted(records, key=lambda r: r["seed"])
    ok = [r for r in records if r["error"] is None]
    theta0 = np.asarray(config.theta0)

    def agg(key):
        vals = _col(ok, key)
        return rmse(vals, theta0) if vals else float("nan")

    r_hats = _col(ok, "r_hat")
    return McSummary(
        N=config.N, T=config.T, design=config.design, dgp=config.dgp, replications=len(ok),
        failures=len(records) - len(ok), rmse_first=agg("theta_first"), rmse_second=agg("theta_second"),
        mean_r_hat=float(np.mean(r_hats)) if r_hats else float("nan"),
        rmse_abc=agg("theta_abc"), rmse_jbc=agg("theta_jbc"), per_seed=records,
    )


def _run_star(args):
    return run_one(*args)


def run_replications(config: DesignConfig, S: int, opts: PipelineOptions | None = None, workers=1,
                     progress=None) -> McSummary:
    """Run replications s = 0..S-1 of ``config`` (in-process for one worker,
    else in a process pool) and summarize. Results do not depend on ``workers``."""
    if S < 1:
        raise ValidationError("S must be at least 1")
    opts = opts or PipelineOptions()
    workers = max(1, min(int(workers or 1), S, os.cpu_count() or 1))
    jobs = [(config, s, opts) for s in range(S)]
    records = []
    if workers == 1:
        for job in jobs:
            records.append(_run_star(job))
            if progress:
                progress(records[-1])
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for rec in ex.map(_run_star, jobs):
                records.append(rec)
                if progress:
                    progress(rec)
    return summarize(config, records)


TABLE_COLUMNS = ("N", "T", "rmse_first", "mean_r_hat", "rmse_second")


def format_table(summaries) -> str:
    """CSV text with one row per summary and fixed 4-decimal formatting."""
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for s in summaries:
        w.writerow(s.table_row())
    return buf.getvalue()


def write_table(path, summaries):
    with open(path, "w", newline="") as fh:
        fh.write(format_table(summaries))


def config_dict(config: DesignConfig):
    return asdict(config)
