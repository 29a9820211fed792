"""Command-line front end.

    nnrpanel simulate | tune | estimate | refine | bias-correct | mc [flags]

Every flag can also come from a plain ``key = value`` file passed with
``--config``; flags given on the command line win. Exit codes: 0 on success,
1 for invalid input, 2 for numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .bias import analytic_correction, estimate_bias_components, jackknife_correction
from .errors import NnrError, NumericalError, ValidationError
from .io import read_panel_csv, read_results, record_to_dict, write_panel_csv, write_results
from .montecarlo import (
    DesignConfig, PipelineOptions, format_table, generate, half_panel_pipeline,
    run_replications, second_step_loss, solver_for,
)
from .panel import ModelSpec, validate
from .refine import RefineConfig, init_from_first_step, refine_iterative
from .tuning import default_grid, estimate_rank, select_nu

log = logging.getLogger("nnrpanel")

COMMANDS = ("simulate", "tune", "estimate", "refine", "bias-correct", "mc")


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment. Keys may use dashes
    or underscores."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def build_parser():
    ap = argparse.ArgumentParser(prog="nnrpanel", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="key = value file; command-line flags override it")
    ap.add_argument("--input", help="panel CSV (long format i,t,y,x1..xp)")
    ap.add_argument("--init", help="result file from the previous stage (refine, bias-correct)")
    ap.add_argument("--output", help="where to write the result")
    ap.add_argument("--model", choices=("linear", "logit", "probit", "quantile", "rclogit"))
    ap.add_argument("--tau", type=float)
    ap.add_argument("--bandwidth", type=float)
    ap.add_argument("--draws", type=int)
    ap.add_argument("--nu", type=float)
    ap.add_argument("--nu-grid", help="comma-separated nu values, or a point count for the default grid")
    ap.add_argument("--penalty", help="design1 | design2 | custom=V")
    ap.add_argument("--rank", type=int)
    ap.add_argument("--radius-c", type=float)
    ap.add_argument("--trunc-L", dest="trunc_L", type=int)
    ap.add_argument("--method", help="abc | jbc (mc also accepts abc+jbc)")
    ap.add_argument("--design", type=int, choices=(1, 2))
    ap.add_argument("--dgp", type=int, choices=(1, 2))
    ap.add_argument("--N", dest="N", type=int)
    ap.add_argument("--T", dest="T", type=int)
    ap.add_argument("--S", dest="S", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--threads", type=int)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


DEFAULTS = {
    "model": "logit", "draws": 200, "penalty": None, "radius_c": 2.0, "method": None, "design": 1, "dgp": 1,
    "N": 100, "T": 100, "S": 50, "seed": 0, "threads": None,
}


def resolve_config(argv):
    """Merge defaults, the config file and command-line flags (in that order)."""
    ap = build_parser()
    ns = ap.parse_args(argv)
    cfg = dict(DEFAULTS)
    if ns.config:
        types = {a.dest: a.type for a in ap._actions if a.type is not None}
        for k, v in parse_config_file(ns.config).items():
            if k not in vars(ns):
                raise ValidationError(f"unknown config key {k!r}")
            try:
                cfg[k] = types[k](v) if k in types else v
            except ValueError:
                raise ValidationError(f"config key {k!r}: bad value {v!r}") from None
    for k, v in vars(ns).items():
        if v is not None or k not in cfg:
            cfg[k] = v
    return argparse.Namespace(**cfg)


def model_spec(cfg) -> ModelSpec:
    m = cfg.model
    if m == "linear":
        return ModelSpec.linear()
    if m == "logit":
        return ModelSpec.logit()
    if m == "probit":
        return ModelSpec.binary("normal")
    if m == "quantile":
        if cfg.tau is None:
            raise ValidationError("--tau is required for the quantile model")
        return ModelSpec.quantile(cfg.tau, cfg.bandwidth)
    return ModelSpec.rclogit(draws=int(cfg.draws))


def pipeline_options(cfg, bias="none") -> PipelineOptions:
    return PipelineOptions(
        bias=bias, penalty=cfg.penalty, radius_c=float(cfg.radius_c), trunc_L=cfg.trunc_L,
        draws=int(cfg.draws), rank=cfg.rank,
    )


def _need(cfg, *names):
    for n in names:
        if getattr(cfg, n) is None:
            raise ValidationError(f"--{n.replace('_', '-')} is required for {cfg.command}")


def _load_panel(cfg, spec=None):
    _need(cfg, "input")
    try:
        panel = read_panel_csv(cfg.input)
    except FileNotFoundError:
        raise ValidationError(f"input file not found: {cfg.input}") from None
    problems = validate(panel, spec)
    if problems:
        raise ValidationError("invalid panel: " + "; ".join(problems[:5]))
    return panel


def _load_record(path):
    try:
        return read_results(path)
    except FileNotFoundError:
        raise ValidationError(f"result file not found: {path}") from None


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _grid(cfg, panel):
    if cfg.nu_grid is None:
        return None
    text = str(cfg.nu_grid).strip()
    if "," not in text and text.isdigit():
        return default_grid(panel.N, panel.T, int(text))
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError:
        raise ValidationError(f"bad --nu-grid {cfg.nu_grid!r}") from None


def _fmt(v):
    return np.array2string(np.asarray(v), precision=4, separator=", ")


def cmd_simulate(cfg):
    _need(cfg, "output")
    config = DesignConfig(design=cfg.design, dgp=cfg.dgp, N=cfg.N, T=cfg.T, seed=cfg.seed)
    panel, truth = generate(config)
    write_panel_csv(cfg.output, panel)
    truth_path = Path(str(cfg.output) + ".truth.json")
    write_results_plain(truth_path, {"theta0": truth.theta0, "Lambda0": truth.Lambda0, "F0": truth.F0})
    print(f"simulated design {config.design} dgp {config.dgp}: N={panel.N} T={panel.T} p={panel.p}, "
          f"mean y = {panel.Y.mean():.4f}")
    print(f"wrote {cfg.output} and {truth_path}")


def write_results_plain(path, data):
    Path(path).write_text(json.dumps(record_to_dict(data), indent=1, sort_keys=True) + "\n")


def cmd_tune(cfg):
    _need(cfg, "output")
    spec = model_spec(cfg)
    panel = _load_panel(cfg, spec)
    opts = pipeline_options(cfg)
    res = select_nu(panel, spec, _grid(cfg, panel), cfg.penalty, solver_for(spec, opts, cfg.seed))
    write_results(cfg.output, res)
    print(f"nu* = {res.nu_star:.6g}, r_hat = {res.r_hat}, penalty {res.penalty_kind} = {res.penalty:.6g}")
    print(f"{len(res.ic_path)} grid points fitted, {len(res.pruned)} pruned, {len(res.failures)} failed")


def cmd_estimate(cfg):
    _need(cfg, "output")
    spec = model_spec(cfg)
    panel = _load_panel(cfg, spec)
    opts = pipeline_options(cfg)
    if cfg.nu is None:
        est = select_nu(panel, spec, _grid(cfg, panel), cfg.penalty, solver_for(spec, opts, cfg.seed)).estimate
    else:
        est, _ = solver_for(spec, opts, cfg.seed)(panel, spec, cfg.nu, None)
    write_results(cfg.output, est)
    r = estimate_rank(est.singular_values, panel.N, panel.T, est.nu)
    print(f"first step ({est.solver}): theta = {_fmt(est.theta)}, nu = {est.nu:.6g}, r_hat = {r}, "
          f"converged = {est.converged} after {est.iters} iterations")


def cmd_refine(cfg):
    _need(cfg, "output", "init")
    spec = model_spec(cfg)
    panel = _load_panel(cfg, spec)
    first = _load_record(cfg.init)
    if getattr(first, "record_kind", "") != "first_step":
        raise ValidationError(f"{cfg.init} is not a first-step result")
    if first.Pi.shape != (panel.N, panel.T):
        raise ValidationError("first-step Pi does not match the panel dimensions")
    r = cfg.rank if cfg.rank is not None else estimate_rank(first.singular_values, panel.N, panel.T, first.nu)
    theta, factors = init_from_first_step(first, r)
    loss = second_step_loss(panel, spec, cfg.seed)
    res = refine_iterative(panel, spec, theta, factors, RefineConfig(c_radius=float(cfg.radius_c)), loss=loss)
    res.provenance = {
        "init_path": str(cfg.init), "init_sha256": _sha256(cfg.init),
        "panel_path": str(cfg.input), "panel_sha256": _sha256(cfg.input),
        "nu": float(first.nu), "rank": int(r), "seed": int(cfg.seed),
    }
    write_results(cfg.output, res)
    print(f"second step: theta = {_fmt(res.theta)}, rank = {r}, outer iterations = {res.outer_iters}, "
          f"converged = {res.converged}, clip events = {res.clip_events}")


def cmd_bias_correct(cfg):
    _need(cfg, "output", "init")
    spec = model_spec(cfg)
    panel = _load_panel(cfg, spec)
    second = _load_record(cfg.init)
    if getattr(second, "record_kind", "") != "second_step":
        raise ValidationError(f"{cfg.init} is not a second-step result")
    loss = second_step_loss(panel, spec, int(second.provenance.get("seed", cfg.seed)))
    comps = estimate_bias_components(panel, spec, second.theta, second.factors, cfg.trunc_L, loss=loss)
    method = (cfg.method or "abc").lower()
    if method == "abc":
        res = analytic_correction(second.theta, comps, panel.N, panel.T)
    elif method == "jbc":
        nu = second.provenance.get("nu", cfg.nu)
        if nu is None:
            raise ValidationError("jbc needs the first-step nu (from refine provenance or --nu)")
        pipe = half_panel_pipeline(spec, pipeline_options(cfg), float(nu), panel.N, panel.T, second.factors.r,
                                   int(second.provenance.get("seed", cfg.seed)))
        res = jackknife_correction(panel, pipe, second.theta, comps)
    else:
        raise ValidationError(f"unknown bias-correction method {cfg.method!r}")
    write_results(cfg.output, res)
    lo, hi = res.confidence_interval()
    print(f"{res.method} correction: theta = {_fmt(res.theta_corrected)} (uncorrected {_fmt(second.theta)})")
    print(f"se = {_fmt(res.se)}; 95% intervals [{_fmt(lo)}, {_fmt(hi)}]")


def cmd_mc(cfg):
    _need(cfg, "output")
    config = DesignConfig(design=cfg.design, dgp=cfg.dgp, N=cfg.N, T=cfg.T, seed=cfg.seed)
    opts = pipeline_options(cfg, bias=cfg.method or "none")
    threads = cfg.threads or os.cpu_count() or 1
    summary = run_replications(config, int(cfg.S), opts, workers=threads)
    table = format_table([summary])
    Path(cfg.output).write_text(table)
    write_results(str(cfg.output) + ".json", summary)
    sys.stdout.write(table)
    extra = [f"{k} = {getattr(summary, k):.4f}" for k in ("rmse_abc", "rmse_jbc") if not math.isnan(getattr(summary, k))]
    print(f"replications = {summary.replications}, failures = {summary.failures}" + "".join(", " + e for e in extra))


HANDLERS = {
    "simulate": cmd_simulate, "tune": cmd_tune, "estimate": cmd_estimate, "refine": cmd_refine,
    "bias-correct": cmd_bias_correct, "mc": cmd_mc,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = resolve_config(argv)
    except ValidationError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse usage errors
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if cfg.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        HANDLERS[cfg.command](cfg)
    except ValidationError as exc:
        print(f"error [{cfg.command}]: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"error [{cfg.command}] numerical failure: {exc}", file=sys.stderr)
        return 2
    except NnrError as exc:
        print(f"error [{cfg.command}]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
