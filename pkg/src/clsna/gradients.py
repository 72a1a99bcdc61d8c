"""Analytic gradients of the CLSNA log posterior, term subsampling and a finite-difference check."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist, squareform

from .errors import InputError, NumericError
from .model import (PARAM_NAMES, GlobalParams, LatentTrajectory, NetworkSeries, ParamLayout,
                    SeriesStructure, VarianceHyperparams, posterior_terms)


@dataclass
class GradientBundle:
    d_latent: np.ndarray  # (T, N, p), zero on absent slots
    d_params: np.ndarray  # one entry per free parameter

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(self.d_latent + other.d_latent, self.d_params + other.d_params)


@dataclass
class TermSample:
    """A subset of posterior factors.

    ``latent`` rows are ``(t, i)``: the prior or transition density of ``z[t, i]``.
    ``edges`` rows are ``(t, i, j)`` with ``i < j``: one Bernoulli dyad term.
    ``priors`` toggles the Gaussian priors on the global parameters.
    """

    latent: np.ndarray
    edges: np.ndarray
    priors: bool = True

    @classmethod
    def empty(cls) -> "TermSample":
        return cls(np.empty((0, 2), dtype=int), np.empty((0, 3), dtype=int), priors=False)

    @classmethod
    def full(cls, struct: SeriesStructure) -> "TermSample":
        latent = np.argwhere(struct.presence)
        edges = np.argwhere(struct.dyads & struct.upper)
        return cls(latent, edges, priors=True)

    def weights(self, struct: SeriesStructure, latent_scale: float = 1.0,
                edge_scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        latent = np.asarray(self.latent, dtype=int).reshape(-1, 2)
        edges = np.asarray(self.edges, dtype=int).reshape(-1, 3)
        w_latent = np.zeros((struct.T, struct.N))
        w_edge = np.zeros((struct.T, struct.N, struct.N))
        if len(latent):
            t, i = latent.T
            if ((t < 0) | (t >= struct.T) | (i < 0) | (i >= struct.N)).any() or \
                    not struct.presence[t, i].all():
                raise InputError("latent term index refers to an absent or unknown (t, i)")
            np.add.at(w_latent, (t, i), latent_scale)
        if len(edges):
            t, i, j = edges.T
            if ((t < 0) | (t >= struct.T) | (i < 0) | (j >= struct.N) | (i >= j)).any() or \
                    not struct.dyads[t, i, j].all():
                raise InputError("edge term index must be (t, i, j) with i < j, both present")
            np.add.at(w_edge, (t, i, j), edge_scale)
            np.add.at(w_edge, (t, j, i), edge_scale)
        return w_latent, w_edge


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def weighted_gradient(struct: SeriesStructure, layout: ParamLayout, free: np.ndarray,
                      Z: np.ndarray, hyper: VarianceHyperparams, w_latent: np.ndarray | None = None,
                      w_edge: np.ndarray | None = None, priors: bool = True) -> GradientBundle:
    """Gradient of a weighted sum of posterior factors.

    ``w_latent[t, i]`` multiplies the latent density of ``z[t, i]``; ``w_edge`` is a
    symmetric matrix of dyad weights.  ``None`` means weight one everywhere.
    """
    theta = layout.expand(free)
    T, N, p = Z.shape
    dZ = np.zeros_like(Z)
    d_theta = np.zeros((T, len(PARAM_NAMES)))
    for t in range(T):
        alpha, delta, gw1, gw2, gb = theta[t]
        dist = struct.distances(Z, t)
        X = struct.prev_edge[t]
        resid_y = struct.Y[t] - _sigmoid(alpha + delta * X - dist)
        G = resid_y * struct.dyads[t]
        if w_edge is not None:
            G = G * w_edge[t]
        d_theta[t, 0] += 0.5 * G.sum()
        d_theta[t, 1] += 0.5 * (G * X).sum()
        with np.errstate(divide="ignore", invalid="ignore"):
            K = np.where(dist > 0, G / dist, 0.0)
        dZ[t] -= K.sum(axis=1)[:, None] * Z[t] - K @ Z[t]

        wl = struct.presence[t].astype(float) if w_latent is None else w_latent[t] * struct.presence[t]
        if t == 0:
            dZ[0] -= wl[:, None] * Z[0] / hyper.tau2
            continue
        A_w, A_b = struct.attractor_arrays(Z, t - 1)
        gw = np.where(struct.group1, gw1, gw2)
        resid = Z[t] - (Z[t - 1] + gw[:, None] * A_w + gb * A_b)
        U = (wl * struct.retained[t])[:, None] * resid / hyper.sigma2
        dZ[t] -= U
        # adjoint of mu = z + gw * (W_s z - m_s z) + gb * (W_b z - m_b z)
        gU = gw[:, None] * U
        dZ[t - 1] += (U + struct.W_same[t - 1].T @ gU - struct.has_same[t - 1][:, None] * gU
                      + gb * (struct.W_between[t - 1].T @ U - struct.has_between[t - 1][:, None] * U))
        inner_w = (U * A_w).sum(axis=1)
        d_theta[t, 2] += inner_w[struct.group1].sum()
        d_theta[t, 3] += inner_w[~struct.group1].sum()
        d_theta[t, 4] += (U * A_b).sum()

        new = struct.entering[t]
        if new.any():
            means = struct.group_means(Z, t - 1)
            mu_new = np.where(struct.group1[:, None], means[0], means[1])
            V = (wl * new)[:, None] * (Z[t] - mu_new) / hyper.phi2
            dZ[t] -= V
            for g, mask in enumerate((struct.group1, ~struct.group1)):
                count = struct.group_counts[t - 1, g]
                if count == 0:
                    continue
                members = struct.presence[t - 1] & mask
                dZ[t - 1, members] += V[mask].sum(axis=0) / count
    d_free = layout.collapse(d_theta)
    if priors:
        mean, var = layout.prior_arrays(hyper)
        d_free -= (np.asarray(free) - mean) / var
    if not (np.isfinite(dZ).all() and np.isfinite(d_free).all()):
        raise NumericError("non-finite gradient")
    return GradientBundle(dZ, d_free)


def grad_full(series: NetworkSeries, latent: LatentTrajectory, params: GlobalParams,
              hyper: VarianceHyperparams | None = None, delta_rule: str = "both_present",
              struct: SeriesStructure | None = None) -> GradientBundle:
    """Exact gradient of :func:`clsna.model.log_posterior`."""
    hyper = hyper or VarianceHyperparams()
    struct = struct or SeriesStructure(series, delta_rule)
    return weighted_gradient(struct, ParamLayout.constant(series.T), params.to_array(),
                             latent.positions, hyper)


def grad_subsampled(series: NetworkSeries, latent: LatentTrajectory, params: GlobalParams,
                    hyper: VarianceHyperparams | None, sample: TermSample, rescale: bool = False,
                    delta_rule: str = "both_present",
                    struct: SeriesStructure | None = None) -> GradientBundle:
    """Gradient of the log of the product of the sampled factors only.

    With ``rescale=True`` each category is scaled by (total terms / sampled terms),
    which makes the result an unbiased estimate of :func:`grad_full` under uniform
    sampling within categories.
    """
    hyper = hyper or VarianceHyperparams()
    struct = struct or SeriesStructure(series, delta_rule)
    latent_scale = edge_scale = 1.0
    if rescale:
        n_lat, n_edge = len(sample.latent), len(sample.edges)
        latent_scale = struct.n_latent_terms / n_lat if n_lat else 0.0
        edge_scale = struct.n_edge_terms / n_edge if n_edge else 0.0
    w_latent, w_edge = sample.weights(struct, latent_scale, edge_scale)
    return weighted_gradient(struct, ParamLayout.constant(series.T), params.to_array(),
                             latent.positions, hyper, w_latent, w_edge, priors=sample.priors)


def sample_terms(struct: SeriesStructure, fraction: float, rng: np.random.Generator) -> TermSample:
    """Uniformly sample ``ceil(fraction * count)`` factors from each category without replacement."""
    if not 0 < fraction <= 1:
        raise InputError(f"batch fraction must lie in (0, 1], got {fraction}")
    full = TermSample.full(struct)
    if fraction == 1:
        return full
    pick = []
    for rows in (full.latent, full.edges):
        k = max(1, int(np.ceil(fraction * len(rows)))) if len(rows) else 0
        pick.append(rows[np.sort(rng.choice(len(rows), size=k, replace=False))] if k else rows)
    return TermSample(pick[0], pick[1], priors=True)


def finite_difference(func, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[k] += step
        xm[k] -= step
        grad[k] = (func(xp) - func(xm)) / (2 * step)
    return grad


class CLSNAObjective:
    """Flat-vector view of the posterior used by the optimizer.

    The vector is ``[free parameters, latent positions (T*N*p, absent slots zero)]``.
    """

    def __init__(self, series: NetworkSeries, dim: int, hyper: VarianceHyperparams | None = None,
                 layout: ParamLayout | None = None, delta_rule: str = "both_present",
                 struct: SeriesStructure | None = None):
        if dim < 1:
            raise InputError(f"latent dimension must be positive, got {dim}")
        self.series = series
        self.dim = dim
        self.hyper = hyper or VarianceHyperparams()
        self.layout = layout or ParamLayout.constant(series.T)
        self.struct = struct or SeriesStructure(series, delta_rule)
        self.n_params = self.layout.size
        self.shape = (series.T, series.n_nodes, dim)
        self.size = self.n_params + int(np.prod(self.shape))
        live = np.ones(self.size, dtype=bool)
        live[self.n_params:] = np.repeat(series.presence.ravel(), dim)
        self.live = live
        self.param_grad_scale = self._term_counts() ** -1.0

    def _term_counts(self) -> np.ndarray:
        """Number of likelihood factors each free parameter enters (at least one)."""
        s = self.struct
        per_time = np.zeros((s.T, len(PARAM_NAMES)))
        per_time[:, 0] = s.dyads.sum(axis=(1, 2)) / 2
        per_time[:, 1] = (s.prev_edge > 0).sum(axis=(1, 2)) / 2
        per_time[:, 2] = (s.retained & s.group1).sum(axis=1)
        per_time[:, 3] = (s.retained & ~s.group1).sum(axis=1)
        per_time[:, 4] = s.retained.sum(axis=1)
        return np.maximum(self.layout.collapse(per_time), 1.0)

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return x[:self.n_params], x[self.n_params:].reshape(self.shape)

    def join(self, free: np.ndarray, Z: np.ndarray) -> np.ndarray:
        Z = np.asarray(Z, dtype=float) * self.series.presence[:, :, None]
        return np.concatenate([np.asarray(free, dtype=float), Z.ravel()])

    def terms(self, x: np.ndarray) -> dict[str, float]:
        free, Z = self.split(x)
        return posterior_terms(self.struct, self.layout, free, Z, self.hyper)

    def value(self, x: np.ndarray) -> float:
        return sum(self.terms(x).values())

    def gradient(self, x: np.ndarray, sample: TermSample | None = None) -> np.ndarray:
        free, Z = self.split(x)
        if sample is None:
            g = weighted_gradient(self.struct, self.layout, free, Z, self.hyper)
        else:
            n_lat, n_edge = len(sample.latent), len(sample.edges)
            w_latent, w_edge = sample.weights(
                self.struct,
                self.struct.n_latent_terms / n_lat if n_lat else 0.0,
                self.struct.n_edge_terms / n_edge if n_edge else 0.0)
            g = weighted_gradient(self.struct, self.layout, free, Z, self.hyper,
                                  w_latent, w_edge, priors=sample.priors)
        return np.concatenate([g.d_params, g.d_latent.ravel()])

    def stochastic_gradient(self, x: np.ndarray, rng: np.random.Generator,
                            fraction: float) -> np.ndarray:
        if fraction >= 1:
            return self.gradient(x)
        return self.gradient(x, sample_terms(self.struct, fraction, rng))

    def tie_index(self, x: np.ndarray, tol: float) -> np.ndarray:
        """For each flat coordinate, the coordinate it coincides with.

        Nodes present at the same time whose positions lie within ``tol`` of each
        other form a cluster; every coordinate of the cluster maps to the
        matching coordinate of its first node.  Free parameters map to themselves.
        """
        _, Z = self.split(x)
        T, N, p = self.shape
        rep = np.arange(T * N).reshape(T, N)
        for t in range(T):
            pres = np.flatnonzero(self.series.presence[t])
            if len(pres) < 2:
                continue
            close = np.triu(squareform(pdist(Z[t, pres])) < tol, 1)
            i, j = np.nonzero(close)
            if not len(i):
                continue
            _, label = connected_components(
                coo_matrix((np.ones(len(i)), (i, j)), shape=(len(pres),) * 2), directed=False)
            first = np.full(label.max() + 1, len(pres))
            np.minimum.at(first, label, np.arange(len(pres)))
            rep[t, pres] = t * N + pres[first[label]]
        latent = (rep[:, :, None] * p + np.arange(p)).ravel()
        return np.concatenate([np.arange(self.n_params), self.n_params + latent])

    def align(self, x: np.ndarray, reference: np.ndarray) -> np.ndarray:
        """Rotate/reflect the latent block of ``x`` onto that of ``reference``."""
        from .optimizer import orthogonal_procrustes_matrix

        free, Z = self.split(x)
        _, Z_ref = self.split(reference)
        Q = orthogonal_procrustes_matrix(Z.reshape(-1, self.dim), Z_ref.reshape(-1, self.dim))
        return self.join(free, Z @ Q)
