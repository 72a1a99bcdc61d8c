"""Posterior variances from anchored re-optimization.

For a Gaussian density, clamping one coordinate at ``mode + eta`` and maximizing
over the rest lowers the log density by exactly ``eta**2 / (2 * var)``, and moves
every other coordinate by ``eta * cov / var``.  Reading both quantities off an
anchored optimization of the log posterior gives a Laplace-type estimate of one
row of the posterior covariance without ever forming a Hessian.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import DegeneracyError, InputError
from .optimizer import FitResult, OptimizerConfig, lbfgs_maximize, optimize
from .model import NetworkSeries

logger = logging.getLogger(__name__)

PAPER_ETA_GRID = (-0.03, -0.02, -0.01, 0.01, 0.02, 0.03)
SOLVERS = ("lbfgs", "sgd")


class GaussianObjective:
    """Log density of ``N(mean, cov)`` exposed through the optimizer's objective interface."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.precision = np.linalg.inv(self.cov)
        sign, logdet = np.linalg.slogdet(self.cov)
        if sign <= 0:
            raise InputError("covariance must be positive definite")
        self._const = -0.5 * (len(self.mean) * np.log(2 * np.pi) + logdet)
        self.size = len(self.mean)
        self.n_params = 0
        self.param_grad_scale = np.ones(0)
        self.live = np.ones(self.size, dtype=bool)

    def value(self, x):
        d = np.asarray(x) - self.mean
        return float(self._const - 0.5 * d @ self.precision @ d)

    def gradient(self, x, sample=None):
        return -self.precision @ (np.asarray(x) - self.mean)

    def stochastic_gradient(self, x, rng, fraction):
        return self.gradient(x)

    def align(self, x, reference):
        return x

    def safe_step(self) -> float:
        """A step size that makes momentum-0.9 ascent converge on this density."""
        return 1.0 / np.linalg.eigvalsh(self.precision).max()


@dataclass
class AnchoredEstimate:
    """Outcome of one anchored re-optimization."""

    index: int
    eta: float
    variance: float
    covariance: np.ndarray  # one entry per coordinate of the flat vector
    mode_x: np.ndarray
    anchored_x: np.ndarray
    mode_value: float
    anchored_value: float
    converged: bool


def anchor_config(config: OptimizerConfig, step_factor: float = 0.1) -> OptimizerConfig:
    """Config for anchored runs: smaller steps and no sign warmup.

    The stopping tolerance shrinks with the steps, since the per-iteration
    displacement of a converged run scales with the step size.
    """
    return replace(config, step_latent=config.step_latent * step_factor,
                   step_params=config.step_params * step_factor,
                   stop_eps=config.stop_eps * step_factor, sign_warmup_iters=0)


def maximize(objective, x0, config: OptimizerConfig, clamp: dict[int, float] | None = None,
             solver: str = "sgd"):
    """Dispatch to momentum ascent (``"sgd"``) or L-BFGS (``"lbfgs"``)."""
    if solver == "sgd":
        return optimize(objective, x0, config, clamp=clamp, warmup=0)
    if solver == "lbfgs":
        return lbfgs_maximize(objective, x0, clamp, max_iters=max(config.max_iters, 20000))
    raise InputError(f"unknown solver {solver!r}; expected one of {list(SOLVERS)}")


def polish_mode(objective, x_mode, config: OptimizerConfig, solver: str = "sgd"):
    """Continue the unconstrained optimization with the anchored-run solver.

    Both ends of the variance ratio are then produced by the same optimizer, so
    their residual optimization error largely cancels.
    """
    res = maximize(objective, x_mode, config, solver=solver)
    return res.x, res.value


def anchored_estimate(objective, x_mode, index: int, eta: float, config: OptimizerConfig,
                      mode_value: float | None = None, solver: str = "sgd") -> AnchoredEstimate:
    """Variance of coordinate ``index`` and its covariance with every coordinate."""
    if eta == 0 or not np.isfinite(eta):
        raise InputError(f"perturbation must be finite and non-zero, got {eta}")
    x_mode = np.asarray(x_mode, dtype=float)
    if mode_value is None:
        mode_value = objective.value(x_mode)
    clamp = {int(index): float(x_mode[index] + eta)}
    res = maximize(objective, x_mode, config, clamp, solver)
    drop = mode_value - res.value
    if not drop > 0:
        raise DegeneracyError(
            f"anchored optimum {res.value:.10g} is not below the mode {mode_value:.10g} "
            f"for coordinate {index} with eta={eta:g}; the mode may be unconverged or eta too small")
    variance = 0.5 * eta ** 2 / drop
    anchored = objective.align(res.x, x_mode)
    covariance = variance / eta * (anchored - x_mode)
    covariance[index] = variance
    return AnchoredEstimate(int(index), float(eta), float(variance), covariance, x_mode, anchored,
                            float(mode_value), float(res.value), res.converged)


# --- CLSNA-level API ------------------------------------------------------------------

def default_eta(value: float) -> float:
    return 0.01 * max(1.0, abs(value))


# automatic perturbations grow until the log-posterior drop clears optimizer noise
MIN_DROP = 1e-3
ETA_GROWTH = 4.0
MAX_ETA_STEPS = 5


def _auto_anchored(objective, x_mode, k: int, eta: float, cfg, mode_value,
                   solver: str = "sgd") -> AnchoredEstimate:
    for step in range(MAX_ETA_STEPS + 1):
        try:
            est = anchored_estimate(objective, x_mode, k, eta, cfg, mode_value, solver)
            if est.mode_value - est.anchored_value >= MIN_DROP:
                return est
        except DegeneracyError:
            if step == MAX_ETA_STEPS:
                raise
        if step < MAX_ETA_STEPS:
            logger.info("drop below %g for coordinate %d at eta=%g; retrying with eta=%g",
                        MIN_DROP, k, eta, eta * ETA_GROWTH)
            eta *= ETA_GROWTH
    return est


@dataclass
class VarianceEstimate:
    target: str
    variance: float
    covariance: dict            # other global parameter -> covariance
    latent_covariance: np.ndarray  # (T, N, p)
    eta: float
    mode_log_posterior: float
    anchored_log_posterior: float
    converged: bool


def _resolve(series: NetworkSeries, mode_fit: FitResult, config: OptimizerConfig | None,
             polish: bool, solver: str, objective=None):
    if solver not in SOLVERS:
        raise InputError(f"unknown solver {solver!r}; expected one of {list(SOLVERS)}")
    objective = objective or mode_fit.objective(series)
    config = anchor_config(config or OptimizerConfig())
    x = mode_fit.as_vector()
    if polish:
        x, value = polish_mode(objective, x, config, solver)
    else:
        value = objective.value(x)
    return objective, config, x, value, solver


def estimate_variance(series: NetworkSeries, mode_fit: FitResult, target: str,
                      eta: float | None = None, config: OptimizerConfig | None = None,
                      polish: bool = True, solver: str = "lbfgs",
                      _prepared=None) -> VarianceEstimate:
    """Posterior variance of one global parameter and its covariance row.

    The mode and the anchored optima are found by ``solver``: L-BFGS by default,
    or ``"sgd"`` for momentum ascent with the fitting ``config`` at one-tenth
    step sizes and no sign warmup.  With ``polish`` the mode is first
    re-optimized by the same solver.  Without an explicit ``eta`` the default
    ``0.01 * max(1, |mode|)`` is multiplied by 4 (at most five times) while the
    log-posterior drop stays below ``MIN_DROP``.
    """
    objective, cfg, x_mode, mode_value, solver = (
        _prepared or _resolve(series, mode_fit, config, polish, solver))
    names = list(objective.layout.names)
    if target not in names:
        raise InputError(f"unknown target parameter {target!r}; expected one of {names}")
    k = names.index(target)
    if eta is None:
        est = _auto_anchored(objective, x_mode, k, default_eta(x_mode[k]), cfg, mode_value, solver)
    else:
        est = anchored_estimate(objective, x_mode, k, float(eta), cfg, mode_value, solver)
    eta = est.eta
    cov_params, cov_latent = objective.split(est.covariance)
    logger.info("Var(%s) = %.6g (eta=%g, drop=%.6g)", target, est.variance, eta,
                est.mode_value - est.anchored_value)
    return VarianceEstimate(
        target=target, variance=est.variance,
        covariance={n: float(c) for n, c in zip(names, cov_params)},
        latent_covariance=cov_latent.copy(), eta=eta,
        mode_log_posterior=est.mode_value, anchored_log_posterior=est.anchored_value,
        converged=est.converged)


def combine_variance(estimates: Mapping[str, VarianceEstimate],
                     coefficients: Mapping[str, float]) -> float:
    """Variance of a linear combination from per-parameter estimates.

    Each pairwise covariance is the average of the two available estimates.
    """
    missing = set(coefficients) - set(estimates)
    if missing:
        raise InputError(f"no variance estimate for {sorted(missing)}")
    names = list(coefficients)
    total = 0.0
    for a in names:
        total += coefficients[a] ** 2 * estimates[a].variance
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            cov = 0.5 * (estimates[a].covariance[b] + estimates[b].covariance[a])
            total += 2 * coefficients[a] * coefficients[b] * cov
    return float(total)


def estimate_variance_combo(series: NetworkSeries, mode_fit: FitResult,
                            coefficients: Mapping[str, float],
                            eta: Mapping[str, float] | None = None,
                            config: OptimizerConfig | None = None, polish: bool = True,
                            solver: str = "lbfgs") -> float:
    """Variance of ``sum(c_k * theta_k)`` over the named global parameters."""
    prepared = _resolve(series, mode_fit, config, polish, solver)
    eta = eta or {}
    estimates = {name: estimate_variance(series, mode_fit, name, eta.get(name), config,
                                         _prepared=prepared)
                 for name in coefficients}
    return combine_variance(estimates, coefficients)


@dataclass
class UncertaintyReport:
    variances: dict
    covariance_rows: dict
    perturbation_used: dict
    anchored_fit_log_posteriors: dict
    combinations: dict = field(default_factory=dict)
    latent_covariance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": "clsna.uncertainty/1",
            "variances": dict(self.variances),
            "covariance_rows": {k: dict(v) for k, v in self.covariance_rows.items()},
            "perturbation_used": dict(self.perturbation_used),
            "anchored_fit_log_posteriors": {k: list(v) for k, v in self.anchored_fit_log_posteriors.items()},
            "combinations": dict(self.combinations),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def parse_combination(text: str) -> dict[str, float]:
    """Parse ``"gamma_w1-gamma_b"`` or ``"1*alpha+0.5*delta"`` into coefficients."""
    coefficients: dict[str, float] = {}
    for sign, coef, name in re.findall(r"([+-]?)\s*(?:([0-9.eE]+)\s*\*)?\s*([A-Za-z_][\w\[\]]*)",
                                       text.replace(" ", "")):
        value = float(coef) if coef else 1.0
        coefficients[name] = coefficients.get(name, 0.0) + (-value if sign == "-" else value)
    if not coefficients:
        raise InputError(f"cannot parse linear combination {text!r}")
    return coefficients


def build_report(series: NetworkSeries, mode_fit: FitResult, targets: Sequence[str] | None = None,
                 combos: Mapping[str, Mapping[str, float]] | None = None,
                 eta: Mapping[str, float] | None = None, config: OptimizerConfig | None = None,
                 polish: bool = True, keep_latent: bool = False,
                 solver: str = "lbfgs") -> UncertaintyReport:
    """Run the anchored estimator for each target and assemble the report."""
    prepared = _resolve(series, mode_fit, config, polish, solver)
    names = list(prepared[0].layout.names)
    targets = list(targets or names)
    combos = dict(combos or {})
    for coeffs in combos.values():
        for name in coeffs:
            if name not in targets:
                targets.append(name)
    eta = eta or {}
    estimates = {t: estimate_variance(series, mode_fit, t, eta.get(t), config,
                                      _prepared=prepared)
                 for t in targets}
    return UncertaintyReport(
        variances={t: e.variance for t, e in estimates.items()},
        covariance_rows={t: e.covariance for t, e in estimates.items()},
        perturbation_used={t: e.eta for t, e in estimates.items()},
        anchored_fit_log_posteriors={t: (e.mode_log_posterior, e.anchored_log_posterior)
                                     for t, e in estimates.items()},
        combinations={label: combine_variance(estimates, c) for label, c in combos.items()},
        latent_covariance={t: e.latent_covariance for t, e in estimates.items()} if keep_latent else {},
    )


# --- diagnostics ----------------------------------------------------------------------

@dataclass
class NormalityDiagnostic:
    etas: np.ndarray
    anchored_values: np.ndarray
    implied_variance: np.ndarray
    mode_value: float
    r_squared: float

    def rows(self) -> list[dict]:
        return [{"eta": float(e), "anchored_log_posterior": float(v), "implied_variance": float(s)}
                for e, v, s in zip(self.etas, self.anchored_values, self.implied_variance)]


@dataclass
class LinearityDiagnostic:
    etas: np.ndarray
    slopes: np.ndarray  # (n_coords, n_eta)
    coords: np.ndarray  # flat-vector indices of the reported coordinates

    def summary(self) -> np.ndarray:
        """Per-coordinate (min, mean, max) slope, sorted by mean slope."""
        table = np.column_stack([self.slopes.min(axis=1), self.slopes.mean(axis=1),
                                 self.slopes.max(axis=1)])
        return table[np.argsort(table[:, 1], kind="stable")]

    def central(self, keep: float = 0.95) -> np.ndarray:
        """Summary rows left after trimming the extreme ``1 - keep`` fraction by mean slope."""
        table = self.summary()
        cut = int(np.floor(len(table) * (1 - keep) / 2))
        return table[cut:len(table) - cut] if cut else table

    def spread(self, keep: float = 0.95) -> np.ndarray:
        """``(max - min) / |mean|`` for the central coordinates."""
        table = self.central(keep)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (table[:, 2] - table[:, 0]) / np.abs(table[:, 1])


def _check_grid(eta_grid):
    etas = np.asarray(list(eta_grid), dtype=float)
    if etas.size == 0 or (etas == 0).any():
        raise InputError("eta grid must be non-empty and exclude zero")
    return etas


def anchored_sweep(objective, x_mode, index: int, eta_grid, config: OptimizerConfig,
                   mode_value: float | None = None, solver: str = "sgd") -> list[AnchoredEstimate]:
    etas = _check_grid(eta_grid)
    if mode_value is None:
        mode_value = objective.value(x_mode)
    return [anchored_estimate(objective, x_mode, index, e, config, mode_value, solver)
            for e in etas]


def normality_from_sweep(sweep: Sequence[AnchoredEstimate]) -> NormalityDiagnostic:
    etas = np.array([e.eta for e in sweep])
    values = np.array([e.anchored_value for e in sweep])
    mode_value = sweep[0].mode_value
    # anchored value is linear in eta**2 under a Gaussian posterior
    X = np.column_stack([np.ones_like(etas), etas ** 2])
    coef, *_ = np.linalg.lstsq(X, values, rcond=None)
    resid = values - X @ coef
    ss_tot = ((values - values.mean()) ** 2).sum()
    r2 = 1.0 - (resid ** 2).sum() / ss_tot if ss_tot > 0 else 1.0
    return NormalityDiagnostic(etas, values, np.array([e.variance for e in sweep]), mode_value,
                               float(r2))


def linearity_from_sweep(sweep: Sequence[AnchoredEstimate], coords: np.ndarray) -> LinearityDiagnostic:
    etas = np.array([e.eta for e in sweep])
    slopes = np.column_stack([(e.anchored_x - e.mode_x)[coords] / e.eta for e in sweep])
    return LinearityDiagnostic(etas, slopes, np.asarray(coords))


def _sweep_for_fit(series, mode_fit, target, eta_grid, config, polish, solver):
    objective, cfg, x_mode, mode_value, solver = _resolve(series, mode_fit, config, polish, solver)
    names = list(objective.layout.names)
    if target not in names:
        raise InputError(f"unknown target parameter {target!r}")
    sweep = anchored_sweep(objective, x_mode, names.index(target), eta_grid, cfg, mode_value, solver)
    return objective, sweep


def diagnostic_normality(series: NetworkSeries, mode_fit: FitResult, target: str,
                         eta_grid=PAPER_ETA_GRID, config: OptimizerConfig | None = None,
                         polish: bool = True, solver: str = "lbfgs") -> NormalityDiagnostic:
    """Anchored maxima over a grid of perturbations and the quadratic-fit R^2."""
    _, sweep = _sweep_for_fit(series, mode_fit, target, eta_grid, config, polish, solver)
    return normality_from_sweep(sweep)


def diagnostic_linearity(series: NetworkSeries, mode_fit: FitResult, target: str,
                         eta_grid=PAPER_ETA_GRID, config: OptimizerConfig | None = None,
                         polish: bool = True, solver: str = "lbfgs") -> LinearityDiagnostic:
    """Per-latent-coordinate slopes ``(anchored - mode) / eta`` over a perturbation grid."""
    objective, sweep = _sweep_for_fit(series, mode_fit, target, eta_grid, config, polish, solver)
    coords = np.flatnonzero(objective.live[objective.n_params:]) + objective.n_params
    return linearity_from_sweep(sweep, coords)
