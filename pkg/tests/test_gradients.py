import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from clsna.errors import InputError
from clsna.gradients import (CLSNAObjective, TermSample, finite_difference, grad_full,
                             grad_subsampled, sample_terms)
from clsna.model import (GlobalParams, NetworkSeries, SeriesStructure,
                         VarianceHyperparams, attractors, log_posterior)

from conftest import random_instance


def relative_error(analytic, numeric):
    # relative where gradients are large, absolute below one
    return np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))


def fd_check(series, latent, params, hyper=None, delta_rule="both_present"):
    obj = CLSNAObjective(series, latent.dim, hyper, delta_rule=delta_rule)
    x = obj.join(params.to_array(), latent.positions)
    live = obj.live

    def f(v):
        full = x.copy()
        full[live] = v
        return obj.value(full)

    return relative_error(obj.gradient(x)[live], finite_difference(f, x[live], 1e-5)).max()


@pytest.mark.parametrize("seed", range(20))
def test_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, T = int(rng.integers(2, 7)), int(rng.integers(1, 5))
    series, latent, params = random_instance(rng, n=n, T=T, churn=True)
    assert fd_check(series, latent, params) <= 1e-4


def test_matches_finite_differences_literal_rule(rng):
    series, latent, params = random_instance(rng, n=5, T=3)
    assert fd_check(series, latent, params, delta_rule="literal") <= 1e-4


def test_absent_slots_have_zero_gradient(rng):
    series, latent, params = random_instance(rng, n=6, T=4)
    g = grad_full(series, latent, params)
    assert np.all(g.d_latent[~series.presence] == 0.0)
    assert g.d_latent.shape == latent.positions.shape and g.d_params.shape == (5,)


def test_stationary_point_of_tiny_problem():
    series = NetworkSeries(("a", "b"), [1, 2], np.ones((1, 2), bool), np.zeros((1, 2, 2), bool))
    obj = CLSNAObjective(series, 2)
    res = minimize(lambda x: -obj.value(x), np.array([0.1, 0, 0, 0, 0, 0.3, 0.2, -0.4, 0.1]),
                   jac=lambda x: -obj.gradient(x), method="BFGS", options={"gtol": 1e-11})
    assert np.abs(obj.gradient(res.x)).max() < 1e-8


def test_gamma_w1_gradient_is_separable(rng):
    # with all attractor coefficients and delta zero the transition mean is z_{t-1}
    series, latent, _ = random_instance(rng, n=3, T=3, churn=False, density=0.7)
    params = GlobalParams(0.4, 0.0, 0.0, 0.0, 0.0)
    hyper = VarianceHyperparams()
    Z = latent.positions
    expected = -(0.0 - 0.5) / 100.0
    for t in range(1, series.T):
        for i in np.flatnonzero(series.labels == 1):
            within = attractors(Z[t - 1], series.adjacency[t - 1], series.labels, int(i)).within
            expected += (Z[t, i] - Z[t - 1, i]) @ within / hyper.sigma2
    got = grad_full(series, latent, params, hyper).d_params[2]
    assert got == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_full_sample_reproduces_full_gradient(rng):
    series, latent, params = random_instance(rng, n=5, T=3)
    struct = SeriesStructure(series)
    full = grad_full(series, latent, params, struct=struct)
    sub = grad_subsampled(series, latent, params, None, TermSample.full(struct), struct=struct)
    np.testing.assert_array_equal(sub.d_latent, full.d_latent)
    np.testing.assert_array_equal(sub.d_params, full.d_params)


def test_empty_sample_is_zero(rng):
    series, latent, params = random_instance(rng, n=4, T=2)
    g = grad_subsampled(series, latent, params, None, TermSample.empty())
    assert not g.d_latent.any() and not g.d_params.any()


def test_invalid_term_index(rng):
    series, latent, params = random_instance(rng, n=4, T=2, churn=False)
    with pytest.raises(InputError):
        grad_subsampled(series, latent, params, None, TermSample(np.array([[5, 0]]), np.empty((0, 3))))
    with pytest.raises(InputError):
        grad_subsampled(series, latent, params, None, TermSample(np.empty((0, 2)), np.array([[0, 2, 1]])))


def test_disjoint_union_is_sum(rng):
    series, latent, params = random_instance(rng, n=5, T=3)
    struct = SeriesStructure(series)
    full = TermSample.full(struct)
    half_l, half_e = len(full.latent) // 2, len(full.edges) // 2
    a = TermSample(full.latent[:half_l], full.edges[:half_e], priors=True)
    b = TermSample(full.latent[half_l:], full.edges[half_e:], priors=False)
    ga = grad_subsampled(series, latent, params, None, a, struct=struct)
    gb = grad_subsampled(series, latent, params, None, b, struct=struct)
    both = grad_subsampled(series, latent, params, None, full, struct=struct)
    summed = ga + gb
    np.testing.assert_allclose(summed.d_latent, both.d_latent, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(summed.d_params, both.d_params, rtol=1e-12, atol=1e-12)


def test_single_term_draws_are_unbiased():
    rng = np.random.default_rng(7)
    series, latent, params = random_instance(rng, n=4, T=3, churn=False, density=0.5)
    struct = SeriesStructure(series)
    full = TermSample.full(struct)
    terms = [TermSample(full.latent[[k]], np.empty((0, 3), int), priors=False)
             for k in range(len(full.latent))]
    terms += [TermSample(np.empty((0, 2), int), full.edges[[k]], priors=False)
              for k in range(len(full.edges))]
    per_term = np.array([np.concatenate([g.d_params, g.d_latent.ravel()]) for g in
                         (grad_subsampled(series, latent, params, None, s, struct=struct) for s in terms)])
    prior_only = grad_subsampled(series, latent, params, None,
                                 TermSample(np.empty((0, 2), int), np.empty((0, 3), int), True),
                                 struct=struct)
    prior = np.concatenate([prior_only.d_params, prior_only.d_latent.ravel()])
    draws = rng.integers(len(terms), size=10_000)
    samples = len(terms) * per_term[draws] + prior
    g = grad_full(series, latent, params, struct=struct)
    target = np.concatenate([g.d_params, g.d_latent.ravel()])
    se = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
    assert np.all(np.abs(samples.mean(axis=0) - target) <= 3 * se + 1e-12)


def test_rescaled_subsample_is_unbiased_in_expectation(rng):
    series, latent, params = random_instance(rng, n=5, T=3, churn=False)
    obj = CLSNAObjective(series, 2)
    x = obj.join(params.to_array(), latent.positions)
    draws = np.array([obj.stochastic_gradient(x, rng, 0.3) for _ in range(4000)])
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - obj.gradient(x)) <= 4 * se + 1e-9)


def test_sample_terms_sizes(rng):
    series, _, _ = random_instance(rng, n=6, T=3, churn=False)
    struct = SeriesStructure(series)
    s = sample_terms(struct, 0.25, rng)
    assert len(s.latent) == int(np.ceil(0.25 * struct.n_latent_terms))
    assert len(s.edges) == int(np.ceil(0.25 * struct.n_edge_terms))
    assert s.priors
    with pytest.raises(InputError):
        sample_terms(struct, 0.0, rng)


@given(seed=st.integers(0, 2 ** 32 - 1), angle=st.floats(0, 2 * np.pi))
def test_rotation_equivariance(seed, angle):
    rng = np.random.default_rng(seed)
    series, latent, params = random_instance(rng, n=5, T=3)
    c, s = np.cos(angle), np.sin(angle)
    Q = np.array([[c, -s], [s, c]])
    g = grad_full(series, latent, params)
    gq = grad_full(series, latent.transformed(Q), params)
    np.testing.assert_allclose(gq.d_latent, g.d_latent @ Q.T, atol=1e-9)
    np.testing.assert_allclose(gq.d_params, g.d_params, rtol=1e-9, atol=1e-9)


def test_objective_value_matches_log_posterior(rng):
    series, latent, params = random_instance(rng, n=5, T=3)
    obj = CLSNAObjective(series, 2)
    x = obj.join(params.to_array(), latent.positions)
    assert obj.value(x) == pytest.approx(log_posterior(series, latent, params), rel=1e-14)


def test_tie_index_groups_coincident_nodes():
    pres = np.ones((2, 4), bool)
    series = NetworkSeries(tuple("abcd"), [1, 1, 2, 2], pres, np.zeros((2, 4, 4), bool))
    obj = CLSNAObjective(series, 2)
    Z = np.arange(16, dtype=float).reshape(2, 4, 2)
    Z[0, 3] = Z[0, 1] + 1e-9   # b and d coincide at time 1 only
    Z[1, 2] = Z[1, 0]          # a and c coincide at time 2 only
    rep = obj.tie_index(obj.join(np.zeros(5), Z), 1e-6)
    latent = rep[5:].reshape(2, 4, 2) - 5
    flat = np.arange(16).reshape(2, 4, 2)
    assert rep[:5].tolist() == list(range(5))
    np.testing.assert_array_equal(latent[0, 3], flat[0, 1])
    np.testing.assert_array_equal(latent[1, 2], flat[1, 0])
    for t, i in [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 3)]:
        np.testing.assert_array_equal(latent[t, i], flat[t, i])
