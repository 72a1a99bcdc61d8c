"""Coevolving latent space network models with attractors, for two-group dynamic networks."""
from .errors import CLSNAError, ConvergenceError, DegeneracyError, InputError, NumericError
from .gradients import CLSNAObjective, grad_full, grad_subsampled
from .model import (PARAM_NAMES, GlobalParams, LatentTrajectory, NetworkSeries, ParamLayout,
                    VarianceHyperparams, log_posterior)
from .optimizer import (FitResult, OptimizerConfig, fit_map, fit_map_staged, procrustes_align)
from .selection import bic, changepoint_scan, fit_segmented
from .simulate import ScenarioSpec, empirical_edge_density, flocking_spec, polarization_spec, simulate
from .uncertainty import (build_report, diagnostic_linearity, diagnostic_normality,
                          estimate_variance, estimate_variance_combo)

__version__ = "0.1.0"

__all__ = [
    "CLSNAError", "ConvergenceError", "DegeneracyError", "InputError", "NumericError",
    "CLSNAObjective", "grad_full", "grad_subsampled",
    "PARAM_NAMES", "GlobalParams", "LatentTrajectory", "NetworkSeries", "ParamLayout",
    "VarianceHyperparams", "log_posterior",
    "FitResult", "OptimizerConfig", "fit_map", "fit_map_staged", "procrustes_align",
    "bic", "changepoint_scan", "fit_segmented",
    "ScenarioSpec", "empirical_edge_density", "flocking_spec", "polarization_spec", "simulate",
    "build_report", "diagnostic_linearity", "diagnostic_normality", "estimate_variance",
    "estimate_variance_combo",
]
