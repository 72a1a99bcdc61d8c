"""Momentum SGD for MAP estimation, with sign-gradient warmup and staged PCA initialization."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import orthogonal_procrustes
from scipy.optimize import minimize

from .errors import InputError, NumericError
from .gradients import CLSNAObjective
from .model import (PARAM_NAMES, GlobalParams, LatentTrajectory, NetworkSeries, ParamLayout,
                    SeriesStructure, VarianceHyperparams)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings for :func:`optimize`.

    ``step_params`` is the fixed increment in sign mode.  In plain mode it
    multiplies the parameter gradient after division by the number of factors
    each parameter enters (``param_scaling="term_count"``), which keeps one step
    size usable across network sizes; ``param_scaling="none"`` uses the raw gradient.
    """

    step_latent: float = 1e-2
    step_params: float = 1e-2
    momentum: float = 0.9
    max_iters: int = 8000
    check_every: int = 100
    stop_eps: float = 1e-4
    batch_fraction: float = 1.0
    sign_warmup_iters: int | None = None
    param_scaling: str = "term_count"
    seed: int = 0

    def __post_init__(self):
        if not (self.step_latent > 0 and self.step_params > 0):
            raise InputError("step sizes must be positive")
        if not 0 <= self.momentum < 1:
            raise InputError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 < self.batch_fraction <= 1:
            raise InputError(f"batch_fraction must lie in (0, 1], got {self.batch_fraction}")
        if self.max_iters < 1 or self.check_every < 1:
            raise InputError("max_iters and check_every must be positive")
        if self.stop_eps <= 0:
            raise InputError("stop_eps must be positive")
        if self.sign_warmup_iters is not None and self.sign_warmup_iters < 0:
            raise InputError("sign_warmup_iters must be non-negative")
        if self.param_scaling not in ("term_count", "none"):
            raise InputError(f"unknown param_scaling {self.param_scaling!r}")

    @property
    def warmup(self) -> int:
        if self.sign_warmup_iters is None:
            return self.max_iters // 5
        return self.sign_warmup_iters


@dataclass
class OptimizerState:
    x: np.ndarray
    velocity: np.ndarray
    iteration: int = 0

    @classmethod
    def start(cls, x0) -> "OptimizerState":
        x0 = np.array(x0, dtype=float)
        return cls(x0, np.zeros_like(x0))


@dataclass
class TraceRow:
    iteration: int
    log_posterior: float
    update_norm: float


@dataclass
class OptimizeResult:
    x: np.ndarray
    value: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def sgd_step(objective, state: OptimizerState, config: OptimizerConfig, mode: str = "plain",
             rng: np.random.Generator | None = None,
             clamp: dict[int, float] | None = None) -> OptimizerState:
    """One ascent step on the (sub-sampled) log posterior with heavy-ball momentum.

    In ``"sign_params"`` mode the global parameters move by ``step_params`` times the
    sign of their gradient (no momentum); latent coordinates always take the momentum
    step.  ``clamp`` pins coordinates to fixed values before and after the step.
    """
    if mode not in ("plain", "sign_params"):
        raise InputError(f"unknown step mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    x = state.x.copy()
    v = state.velocity.copy()
    if clamp:
        idx = np.fromiter(clamp, dtype=int)
        x[idx] = np.fromiter(clamp.values(), dtype=float)
    g = objective.stochastic_gradient(x, rng, config.batch_fraction)
    if not np.isfinite(g).all():
        raise NumericError(f"non-finite gradient at iteration {state.iteration}")
    g = np.where(objective.live, g, 0.0)
    k = objective.n_params
    beta = config.momentum
    v[k:] = beta * v[k:] + config.step_latent * g[k:]
    if mode == "sign_params":
        v[:k] = config.step_params * np.sign(g[:k])
    else:
        g_params = g[:k]
        if config.param_scaling == "term_count":
            g_params = g_params * objective.param_grad_scale
        v[:k] = beta * v[:k] + config.step_params * g_params
    if clamp:
        v[idx] = 0.0
    x += v
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite iterate at iteration {state.iteration}")
    return OptimizerState(x, v, state.iteration + 1)


def optimize(objective, x0, config: OptimizerConfig, clamp: dict[int, float] | None = None,
             warmup: int | None = None) -> OptimizeResult:
    """Run momentum ascent until the iterate stops drifting.

    Every ``check_every`` iterations the update size is measured as the largest
    per-iteration net displacement of any coordinate over the window,
    ``max|x_k - x_{k-c}| / c``.  Steps that oscillate across the kink of the
    distance at coincident positions cancel in this measure, while genuine drift
    does not.  Checks during the sign warmup never stop the run.  At each check
    both the current iterate and the window average are candidates; the best by
    full log posterior is returned.
    """
    rng = np.random.default_rng(config.seed)
    warmup = config.warmup if warmup is None else warmup
    state = OptimizerState.start(x0)
    if clamp:
        state.x[list(clamp)] = list(clamp.values())
    free = objective.live.copy()
    if clamp:
        free[list(clamp)] = False
    best_x, best_val = state.x.copy(), objective.value(state.x)
    trace = [TraceRow(0, best_val, float("nan"))]
    window_start = state.x.copy()
    window_sum = np.zeros_like(state.x)
    converged = False
    while state.iteration < config.max_iters:
        mode = "sign_params" if state.iteration < warmup else "plain"
        state = sgd_step(objective, state, config, mode, rng, clamp)
        window_sum += state.x
        if state.iteration % config.check_every and state.iteration != config.max_iters:
            continue
        span = state.iteration - trace[-1].iteration
        norm = float(np.max(np.abs(state.x - window_start)[free], initial=0.0)) / span
        value = objective.value(state.x)
        trace.append(TraceRow(state.iteration, value, norm))
        logger.debug("iter %d log_posterior %.6f update %.3g", state.iteration, value, norm)
        if value >= best_val:
            best_x, best_val = state.x.copy(), value
        if state.iteration > warmup:
            average = window_sum / span
            avg_value = objective.value(average)
            if avg_value >= best_val:
                best_x, best_val = average, avg_value
        window_start = state.x.copy()
        window_sum[:] = 0.0
        if state.iteration > warmup and norm < config.stop_eps:
            converged = True
            break
    return OptimizeResult(best_x, objective.value(best_x), state.iteration, converged, trace)


def _lbfgs_tied(objective, x, mask, rep, max_iters, gtol):
    """One L-BFGS-B run in which coordinates sharing a representative move together."""
    ids, src = np.unique(rep[mask], return_inverse=True)
    m = len(ids)

    def negative(y):
        z = x.copy()
        z[mask] = y[src]
        return -objective.value(z), -np.bincount(src, objective.gradient(z)[mask], minlength=m)

    res = minimize(negative, x[ids], jac=True, method="L-BFGS-B",
                   options=dict(maxiter=max_iters, maxfun=2 * max_iters, ftol=1e-15,
                                gtol=gtol, maxcor=30))
    z = x.copy()
    z[mask] = res.x[src]
    return z, objective.value(z), res


def lbfgs_maximize(objective, x0, clamp: dict[int, float] | None = None,
                   max_iters: int = 20000, gtol: float = 1e-7, tie_tol: float = 1e-6,
                   max_rounds: int = 10) -> OptimizeResult:
    """Maximize with L-BFGS-B over the live, unclamped coordinates.

    Used where the optimum itself matters rather than a quick approach to it:
    small log-posterior differences between nearby optima need both ends
    resolved to well below the difference.

    Linked nodes often share a position at the optimum, where the distance has
    a kink and the line search stalls.  When the objective provides
    ``tie_index``, runs therefore alternate between moving each cluster of
    coincident positions as one point and moving every coordinate freely, so
    clusters can both form and split.  Rounds stop once a tied and an untied run
    in a row gain less than ``1e-9``.  Only hitting ``max_iters`` in the last
    run counts as unconverged.
    """
    x = np.array(x0, dtype=float)
    mask = objective.live.copy()
    if clamp:
        x[list(clamp)] = list(clamp.values())
        mask[list(clamp)] = False
    tie = getattr(objective, "tie_index", None)
    value = objective.value(x)
    total_iters, gains, res = 0, [], None
    for round_ in range(2 * max_rounds if tie else 1):
        tied = tie is not None and round_ % 2 == 0
        rep = tie(x, tie_tol) if tied else np.arange(len(x))
        z, v, res = _lbfgs_tied(objective, x, mask, rep, max_iters, gtol)
        total_iters += int(res.nit)
        gains.append(v - value)
        if v >= value:
            x, value = z, v
        if len(gains) >= 2 and max(gains[-2:]) < 1e-9:
            break
    if not np.isfinite(value):
        raise NumericError("L-BFGS produced a non-finite log posterior")
    return OptimizeResult(x, value, total_iters, res.status != 1,
                          [TraceRow(total_iters, value, float("nan"))])


# --- CLSNA fitting --------------------------------------------------------------------

@dataclass
class FitResult:
    """MAP estimate of the global parameters and latent trajectory."""

    free_params: dict
    latent_hat: LatentTrajectory
    final_log_posterior: float
    iterations: int
    converged: bool
    trace: list
    layout: ParamLayout
    hyper: VarianceHyperparams
    delta_rule: str = "both_present"

    @property
    def params_hat(self) -> GlobalParams:
        if set(self.free_params) != set(PARAM_NAMES):
            raise InputError("params_hat is only defined for an unsegmented fit")
        return GlobalParams(**self.free_params)

    @property
    def free_vector(self) -> np.ndarray:
        return np.array([self.free_params[n] for n in self.layout.names])

    def objective(self, series: NetworkSeries, struct: SeriesStructure | None = None) -> CLSNAObjective:
        return CLSNAObjective(series, self.latent_hat.dim, self.hyper, self.layout,
                              self.delta_rule, struct=struct)

    def as_vector(self) -> np.ndarray:
        Z = self.latent_hat.positions
        return np.concatenate([self.free_vector, Z.ravel()])


def default_init(objective: CLSNAObjective, rng: np.random.Generator) -> np.ndarray:
    """Zero global parameters and standard-normal latent positions."""
    Z = rng.standard_normal(objective.shape)
    return objective.join(np.zeros(objective.n_params), Z)


def _fit_result(objective: CLSNAObjective, res: OptimizeResult) -> FitResult:
    free, Z = objective.split(res.x)
    return FitResult(
        free_params=dict(zip(objective.layout.names, map(float, free))),
        latent_hat=LatentTrajectory(Z.copy(), objective.series.presence),
        final_log_posterior=res.value,
        iterations=res.iterations,
        converged=res.converged,
        trace=res.trace,
        layout=objective.layout,
        hyper=objective.hyper,
        delta_rule=objective.struct.delta_rule,
    )


def fit_map(series: NetworkSeries, init: tuple | None = None, config: OptimizerConfig | None = None,
            dim: int = 2, hyper: VarianceHyperparams | None = None,
            layout: ParamLayout | None = None, delta_rule: str = "both_present",
            objective: CLSNAObjective | None = None) -> FitResult:
    """MAP fit by momentum SGD.

    ``init`` is ``(params, latent)`` where ``params`` is a :class:`GlobalParams` or a
    free-parameter vector and ``latent`` a :class:`LatentTrajectory` or ``(T, N, p)`` array.
    """
    config = config or OptimizerConfig()
    if objective is None:
        if init is not None:
            dim = np.asarray(getattr(init[1], "positions", init[1])).shape[2]
        objective = CLSNAObjective(series, dim, hyper, layout, delta_rule)
    rng = np.random.default_rng(config.seed)
    if init is None:
        x0 = default_init(objective, rng)
    else:
        params, latent = init
        free = params.to_array() if isinstance(params, GlobalParams) else np.asarray(params, float)
        Z = getattr(latent, "positions", latent)
        if free.shape != (objective.n_params,) or np.shape(Z) != objective.shape:
            raise InputError("initial values do not match the model dimensions")
        x0 = objective.join(free, Z)
    res = optimize(objective, x0, config)
    logger.info("fit finished after %d iterations (converged=%s), log posterior %.6f",
                res.iterations, res.converged, res.value)
    return _fit_result(objective, res)


def pca_project(latent: LatentTrajectory, p: int) -> LatentTrajectory:
    """Project stacked, mean-centered present positions onto their top ``p`` principal axes."""
    pres = latent.presence
    X = latent.positions[pres]
    if p > X.shape[1]:
        raise InputError(f"cannot project {X.shape[1]}-dimensional positions onto {p} axes")
    Xc = X - X.mean(axis=0)
    _, _, Vt = np.linalg.svd(Xc, full_matrices=False)
    out = np.zeros(pres.shape + (p,))
    out[pres] = Xc @ Vt[:p].T
    return LatentTrajectory(out, pres)


def fit_map_staged(series: NetworkSeries, p_target: int = 2, q_over: int = 3,
                   config: OptimizerConfig | None = None, hyper: VarianceHyperparams | None = None,
                   layout: ParamLayout | None = None, delta_rule: str = "both_present",
                   init: tuple | None = None) -> FitResult:
    """Fit in ``q_over`` dimensions, project onto ``p_target`` principal axes, refit.

    The second stage starts its global parameters afresh from zero; only the
    projected latent trajectory is carried over.
    """
    if not (p_target >= 1 and q_over > p_target):
        raise InputError(f"need q_over > p_target >= 1, got q_over={q_over}, p_target={p_target}")
    config = config or OptimizerConfig()
    first = fit_map(series, init, config, dim=q_over, hyper=hyper, layout=layout,
                    delta_rule=delta_rule)
    start = pca_project(first.latent_hat, p_target)
    return fit_map(series, (np.zeros(first.layout.size), start), config, hyper=hyper,
                   layout=layout, delta_rule=delta_rule)


def orthogonal_procrustes_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Orthogonal ``Q`` minimizing ``||A @ Q - B||_F``."""
    Q, _ = orthogonal_procrustes(A, B)
    return Q


def procrustes_align(Z_a, Z_b) -> tuple[LatentTrajectory, np.ndarray, float]:
    """Rotate/reflect trajectory ``Z_a`` onto ``Z_b``.

    Returns the aligned trajectory, the orthogonal matrix ``R`` such that aligned
    positions are ``z @ R`` (equivalently ``R.T @ z`` per column vector), and the
    residual sum of squared distances.
    """
    a = Z_a if isinstance(Z_a, LatentTrajectory) else LatentTrajectory(Z_a, np.ones(np.shape(Z_a)[:2], bool))
    b = Z_b if isinstance(Z_b, LatentTrajectory) else LatentTrajectory(Z_b, np.ones(np.shape(Z_b)[:2], bool))
    if a.positions.shape != b.positions.shape or not np.array_equal(a.presence, b.presence):
        raise InputError("trajectories must share shape and presence pattern")
    A, B = a.positions[a.presence], b.positions[b.presence]
    R = orthogonal_procrustes_matrix(A, B)
    aligned = LatentTrajectory(a.positions @ R, a.presence)
    residual = float(((A @ R - B) ** 2).sum())
    return aligned, R, residual


def slice_orientations(Z_a, Z_b) -> np.ndarray:
    """Determinant sign (+1 or -1) of the best orthogonal map of each centred time slice of ``Z_a`` onto ``Z_b``.

    A trajectory that matches ``Z_b`` up to one global transform has a constant
    sign; a mixture of signs means some slices are reflected relative to others.
    """
    a = Z_a.positions if isinstance(Z_a, LatentTrajectory) else np.asarray(Z_a, float)
    b = Z_b.positions if isinstance(Z_b, LatentTrajectory) else np.asarray(Z_b, float)
    pres = Z_a.presence if isinstance(Z_a, LatentTrajectory) else np.ones(a.shape[:2], bool)
    if a.shape != b.shape:
        raise InputError("trajectories must share shape")
    out = np.zeros(a.shape[0], dtype=int)
    for t in range(a.shape[0]):
        A, B = a[t, pres[t]], b[t, pres[t]]
        R = orthogonal_procrustes_matrix(A - A.mean(axis=0), B - B.mean(axis=0))
        out[t] = 1 if np.linalg.det(R) > 0 else -1
    return out


def trace_table(trace: Sequence[TraceRow]) -> list[dict]:
    return [{"iteration": r.iteration, "log_posterior": r.log_posterior,
             "update_norm": r.update_norm} for r in trace]


def with_steps(config: OptimizerConfig, factor: float, **changes) -> OptimizerConfig:
    return replace(config, step_latent=config.step_latent * factor,
                   step_params=config.step_params * factor, **changes)
