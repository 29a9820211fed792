"""Nuclear-norm regularized estimation of nonlinear panel models with
interactive fixed effects, followed by local refinement and bias correction."""

from .admm import AdmmOptions, FirstStepEstimate, estimate_nnr_admm
from .bias import (
    BiasComponents, BiasCorrectedResult, analytic_correction, estimate_bias_components, estimate_xi,
    jackknife_combine, jackknife_correction,
)
from .errors import (
    ConvergenceError, DivergenceError, InferenceError, JackknifeError, NnrError, NumericalError, PanelFormatError,
    TuningError, UnsupportedFamilyError, ValidationError,
)
from .io import read_panel_csv, read_results, write_panel_csv, write_results
from .losses import (
    DerivativeBundle, RcLogitParams, aggregate_loss, cell_derivatives, cell_loss, make_loss, rc_weights,
    standard_draws,
)
from .lowrank import FactorDecomposition, align_sign, factorize_rank_r, nuclear_norm, project_PM, soft_threshold
from .mm import MmOptions, estimate_nnr_mm
from .montecarlo import DesignConfig, McSummary, PipelineOptions, generate, rmse, run_replications
from .panel import Family, ModelSpec, PanelData, SubpanelSelector, subpanel, validate
from .refine import RefineConfig, SecondStepEstimate, refine_iterative
from .tuning import TuningResult, default_grid, default_penalty, estimate_rank, select_nu

__version__ = "0.1.0"
