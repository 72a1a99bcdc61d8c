from dataclasses import replace

import numpy as np
import pytest

from clsna import selection
from clsna.errors import InputError, NumericError
from clsna.model import ParamLayout, SeriesStructure, posterior_terms
from clsna.optimizer import OptimizerConfig, fit_map
from clsna.selection import bic, changepoint_scan, fit_segmented, map_log_likelihood
from clsna.simulate import flocking_spec, simulate

CONFIG = OptimizerConfig(max_iters=8000, seed=0)


@pytest.fixture(scope="module")
def data():
    series, _ = simulate(flocking_spec(n=12, T=5, seed=2))
    fit = fit_map(series, config=CONFIG)
    assert fit.converged
    return series, fit


def lifted(fit, layout):
    free = {name: fit.free_params[b] for name, b in zip(layout.names, layout.base)}
    return replace(fit, free_params=free, layout=layout)


def test_bic_decomposition(data):
    series, fit = data
    terms = posterior_terms(SeriesStructure(series), fit.layout, fit.free_vector,
                            fit.latent_hat.positions, fit.hyper)
    n_obs = series.n_observations()
    assert bic(fit, series) == -2.0 * terms["edge"] + 5 * np.log(n_obs)
    joint = terms["edge"] + terms["initial"] + terms["transition"] + terms["entering"]
    assert map_log_likelihood(fit, series, "joint") == pytest.approx(joint, rel=1e-14)
    with pytest.raises(InputError):
        map_log_likelihood(fit, series, "marginal")


def test_bic_difference_is_parameter_penalty(data):
    series, fit = data
    seg = lifted(fit, ParamLayout.segmented(series.T, 3, selection.DEFAULT_SPLIT))
    diff = bic(seg, series) - bic(fit, series)
    assert diff == pytest.approx(3 * np.log(series.n_observations()), rel=1e-12)


def test_bic_requires_convergence(data):
    series, fit = data
    with pytest.raises(InputError):
        bic(replace(fit, converged=False), series)


def test_equal_segments_reproduce_unsegmented_posterior(data):
    series, fit = data
    layout = ParamLayout.segmented(series.T, 3, selection.DEFAULT_SPLIT)
    seg = lifted(fit, layout)
    struct = SeriesStructure(series)
    terms = posterior_terms(struct, layout, seg.free_vector, fit.latent_hat.positions, fit.hyper)
    # one extra Gaussian prior factor per duplicated parameter
    mean, var = layout.prior_arrays(fit.hyper)
    x = seg.free_vector
    extra = sum(-0.5 * (x[k] - mean[k]) ** 2 / var[k] - 0.5 * np.log(2 * np.pi * var[k])
                for k, name in enumerate(layout.names) if name.endswith("[2]"))
    assert sum(terms.values()) - extra == pytest.approx(fit.final_log_posterior, abs=1e-6)
    # with nothing split the segmented fit is the unsegmented fit
    same = fit_segmented(series, 3, CONFIG, split=(), base_fit=fit)
    assert same.fit.layout.size == 5
    assert same.fit.final_log_posterior >= fit.final_log_posterior


def test_changepoint_range(data):
    series, fit = data
    for cp in (1, series.T):
        with pytest.raises(InputError):
            fit_segmented(series, cp, CONFIG, base_fit=fit)
    with pytest.raises(InputError):
        changepoint_scan(series, [series.T], CONFIG, base_fit=fit)


def test_segments_partition_parameters(data):
    series, fit = data
    seg = fit_segmented(series, 3, CONFIG, base_fit=fit)
    first, second = seg.segments
    assert first["alpha"] == second["alpha"] and first["delta"] == second["delta"]
    assert seg.n_free_params == 8


def test_single_candidate_table(data):
    series, fit = data
    scan = changepoint_scan(series, [3], CONFIG, base_fit=fit)
    assert len(scan.rows) == 1 and scan.argmin == 3
    table = scan.table()
    assert table[0]["changepoint"] == "none" and len(table) == 2


def test_failed_candidates_are_recorded(data, monkeypatch):
    series, fit = data
    real = selection.fit_segmented

    def flaky(series, cp, *args, **kw):
        if cp == 3:
            raise NumericError("synthetic failure")
        return real(series, cp, *args, **kw)

    monkeypatch.setattr(selection, "fit_segmented", flaky)
    scan = changepoint_scan(series, [2, 3, 4], CONFIG, base_fit=fit)
    assert [r.changepoint for r in scan.rows][-1] == 3
    assert scan.rows[-1].failed and "synthetic" in scan.rows[-1].error
    assert scan.argmin in (2, 4)


def test_scan_is_deterministic(data):
    series, fit = data
    a = changepoint_scan(series, [2, 3], CONFIG, base_fit=fit).table()
    b = changepoint_scan(series, [2, 3], CONFIG, base_fit=fit).table()
    assert a == b
