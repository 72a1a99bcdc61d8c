"""Change-point fits with separately parameterized time segments, compared by BIC."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import CLSNAError, InputError
from .model import PARAM_NAMES, NetworkSeries, ParamLayout, VarianceHyperparams, posterior_terms
from .optimizer import FitResult, OptimizerConfig, fit_map, fit_map_staged

logger = logging.getLogger(__name__)

DEFAULT_SPLIT = ("gamma_w1", "gamma_w2", "gamma_b")
LIKELIHOODS = ("edge", "joint")


@dataclass
class SegmentedFit:
    """MAP fit with global parameters split at ``changepoint`` (1-based first time of segment 2)."""

    changepoint: int
    fit: FitResult
    split: tuple

    @property
    def segments(self) -> list[dict]:
        out = [{}, {}]
        for name, value in self.fit.free_params.items():
            if name.endswith("]"):
                base, seg = name[:-3], int(name[-2]) - 1
                out[seg][base] = value
            else:
                out[0][name] = out[1][name] = value
        return [{n: seg[n] for n in PARAM_NAMES} for seg in out]

    @property
    def n_free_params(self) -> int:
        return self.fit.layout.size

    @property
    def converged(self) -> bool:
        return self.fit.converged


def map_log_likelihood(fit: FitResult, series: NetworkSeries, likelihood: str = "edge") -> float:
    """Log-likelihood at the MAP point.

    ``"edge"`` counts only the Bernoulli dyad terms; ``"joint"`` adds the latent
    prior and transition densities, i.e. ``log p(Y, Z | theta)``.
    """
    if likelihood not in LIKELIHOODS:
        raise InputError(f"likelihood must be one of {LIKELIHOODS}, got {likelihood!r}")
    fit = getattr(fit, "fit", fit)
    obj = fit.objective(series)
    terms = posterior_terms(obj.struct, fit.layout, fit.free_vector, fit.latent_hat.positions,
                            fit.hyper)
    if likelihood == "edge":
        return terms["edge"]
    return terms["edge"] + terms["initial"] + terms["transition"] + terms["entering"]


def bic(fit, series: NetworkSeries, likelihood: str = "edge", require_converged: bool = True) -> float:
    """``-2 * loglik + k * log(n_obs)`` with ``k`` free global parameters and ``n_obs`` dyad-time observations."""
    inner = getattr(fit, "fit", fit)
    if require_converged and not inner.converged:
        raise InputError("BIC requires a converged fit")
    k = inner.layout.size
    return -2.0 * map_log_likelihood(inner, series, likelihood) + k * np.log(series.n_observations())


def _lift(base: FitResult, layout: ParamLayout) -> np.ndarray:
    """Copy unsegmented estimates into every segment of ``layout``."""
    return np.array([base.free_params[b] for b in layout.base])


def fit_segmented(series: NetworkSeries, changepoint: int, config: OptimizerConfig | None = None,
                  split: Sequence[str] = DEFAULT_SPLIT, base_fit: FitResult | None = None,
                  hyper: VarianceHyperparams | None = None, dim: int = 2,
                  delta_rule: str = "both_present") -> SegmentedFit:
    """MAP fit with the ``split`` parameters distinct before and from ``changepoint`` on.

    When ``base_fit`` (an unsegmented fit) is given the segmented fit is
    warm-started from it without sign warmup; otherwise it runs the staged fit.
    """
    if not 2 <= changepoint <= series.T - 1:
        raise InputError(f"changepoint must lie in [2, {series.T - 1}], got {changepoint}")
    config = config or OptimizerConfig()
    layout = ParamLayout.segmented(series.T, changepoint, split)
    if base_fit is not None:
        init = (_lift(base_fit, layout), base_fit.latent_hat)
        fit = fit_map(series, init, replace(config, sign_warmup_iters=0),
                      hyper=hyper or base_fit.hyper, layout=layout, delta_rule=delta_rule)
    else:
        fit = fit_map_staged(series, dim, dim + 1, config, hyper=hyper, layout=layout,
                             delta_rule=delta_rule)
    return SegmentedFit(changepoint, fit, tuple(split))


@dataclass
class ScanRow:
    changepoint: int | None
    bic: float
    converged: bool
    log_likelihood: float
    n_free_params: int
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class ScanResult:
    rows: list  # candidate rows sorted by BIC, failures last
    baseline: ScanRow
    fits: dict = field(default_factory=dict)

    @property
    def best(self) -> ScanRow | None:
        ok = [r for r in self.rows if not r.failed]
        return ok[0] if ok else None

    @property
    def argmin(self) -> int | None:
        best = self.best
        return None if best is None else best.changepoint

    def table(self) -> list[dict]:
        return [{"changepoint": "none" if r.changepoint is None else r.changepoint,
                 "bic": r.bic, "converged": r.converged,
                 "log_likelihood": r.log_likelihood, "n_free_params": r.n_free_params,
                 "error": r.error or ""} for r in [self.baseline] + self.rows]


def changepoint_scan(series: NetworkSeries, candidates: Iterable[int] | None = None,
                     config: OptimizerConfig | None = None, split: Sequence[str] = DEFAULT_SPLIT,
                     base_fit: FitResult | None = None, hyper: VarianceHyperparams | None = None,
                     likelihood: str = "edge", keep_fits: bool = False) -> ScanResult:
    """Fit one segmented model per candidate change-point and rank them by BIC.

    All candidates start from a shared unsegmented fit, whose own BIC is reported
    as the baseline.  A candidate whose fit raises is kept in the table as failed.
    """
    config = config or OptimizerConfig()
    candidates = list(range(2, series.T)) if candidates is None else list(candidates)
    bad = [c for c in candidates if not 2 <= c <= series.T - 1]
    if bad:
        raise InputError(f"candidate change-points outside [2, {series.T - 1}]: {bad}")
    if base_fit is None:
        base_fit = fit_map_staged(series, config=config, hyper=hyper)
    k_base = base_fit.layout.size
    baseline = ScanRow(None, bic(base_fit, series, likelihood, require_converged=False),
                       base_fit.converged, map_log_likelihood(base_fit, series, likelihood), k_base)
    rows, fits = [], {}
    for cp in candidates:
        try:
            seg = fit_segmented(series, cp, config, split, base_fit=base_fit, hyper=hyper)
            rows.append(ScanRow(cp, bic(seg, series, likelihood, require_converged=False),
                                seg.converged, map_log_likelihood(seg.fit, series, likelihood),
                                seg.n_free_params))
            if keep_fits:
                fits[cp] = seg
        except CLSNAError as exc:
            logger.warning("change-point %d failed: %s", cp, exc)
            rows.append(ScanRow(cp, float("nan"), False, float("nan"), 0, error=str(exc)))
    rows.sort(key=lambda r: (r.failed, r.bic if not r.failed else 0.0, r.changepoint))
    return ScanResult(rows, baseline, fits)
