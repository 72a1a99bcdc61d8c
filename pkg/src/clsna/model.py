"""Domain types and log-posterior of the two-group CLSNA model with node churn.

Arrays use dense node indices ``0..N-1`` over the union of all nodes ever
present and 0-based time indices ``0..T-1``.  Absent ``(t, i)`` slots carry
zero latent positions and never enter any term.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError, NumericError

PARAM_NAMES = ("alpha", "delta", "gamma_w1", "gamma_w2", "gamma_b")
DELTA_RULES = ("both_present", "literal")

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GlobalParams:
    alpha: float = 0.0
    delta: float = 0.0
    gamma_w1: float = 0.0
    gamma_w2: float = 0.0
    gamma_b: float = 0.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = getattr(self, name)
            if not np.isfinite(value):
                raise InputError(f"parameter {name} must be finite, got {value}")
            object.__setattr__(self, name, float(value))

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAM_NAMES])

    @classmethod
    def from_array(cls, values) -> "GlobalParams":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(PARAM_NAMES),):
            raise InputError(f"expected {len(PARAM_NAMES)} parameters, got shape {values.shape}")
        return cls(*values.tolist())

    def to_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def gamma_w(self, group: int) -> float:
        return self.gamma_w1 if group == 1 else self.gamma_w2


def _default_prior_mean():
    return {"alpha": 0.0, "delta": 0.0, "gamma_w1": 0.5, "gamma_w2": 0.5, "gamma_b": -0.5}


def _default_prior_var():
    return {name: 100.0 for name in PARAM_NAMES}


@dataclass(frozen=True)
class VarianceHyperparams:
    """Fixed variances of the latent process and Gaussian priors on the global parameters.

    Defaults follow the fitting protocol used for the congressional data:
    ``N(0, 100)`` for alpha and delta, ``N(0.5, 100)`` for the within-group
    coefficients, ``N(-0.5, 100)`` for the between-group coefficient.
    """

    tau2: float = 10.0
    phi2: float = 10.0
    sigma2: float = 1.0
    prior_mean: Mapping[str, float] = field(default_factory=_default_prior_mean)
    prior_var: Mapping[str, float] = field(default_factory=_default_prior_var)

    def __post_init__(self):
        for name in ("tau2", "phi2", "sigma2"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise InputError(f"{name} must be a positive finite number, got {value}")
        mean = dict(_default_prior_mean(), **dict(self.prior_mean))
        var = dict(_default_prior_var(), **dict(self.prior_var))
        for name in list(mean) + list(var):
            if name not in PARAM_NAMES:
                raise InputError(f"unknown parameter {name!r} in priors")
        for name, value in var.items():
            if not (np.isfinite(value) and value > 0):
                raise InputError(f"prior variance for {name} must be positive, got {value}")
        object.__setattr__(self, "prior_mean", mean)
        object.__setattr__(self, "prior_var", var)


@dataclass(frozen=True, eq=False)
class NetworkSeries:
    """Binary undirected snapshots over a changing node set with static two-group labels.

    Attributes
    ----------
    node_ids : tuple of str
        Opaque node identifiers; position ``i`` is the dense index of a node.
    labels : ndarray of shape (N,)
        Group of each node, 1 or 2.
    presence : ndarray of shape (T, N), bool
        ``presence[t, i]`` is True when node ``i`` belongs to ``V_t``.
    adjacency : ndarray of shape (T, N, N), bool
        Symmetric, zero diagonal, edges only between present nodes.
    """

    node_ids: tuple
    labels: np.ndarray
    presence: np.ndarray
    adjacency: np.ndarray

    def __post_init__(self):
        node_ids = tuple(str(n) for n in self.node_ids)
        labels = np.asarray(self.labels, dtype=np.int64)
        presence = np.asarray(self.presence, dtype=bool)
        adjacency = np.asarray(self.adjacency, dtype=bool)
        n = len(node_ids)
        if len(set(node_ids)) != n:
            raise InputError("node identifiers must be unique")
        if labels.shape != (n,):
            raise InputError(f"labels must have shape ({n},), got {labels.shape}")
        if not np.isin(labels, (1, 2)).all():
            raise InputError("group labels must be 1 or 2")
        if presence.ndim != 2 or presence.shape[1] != n or presence.shape[0] < 1:
            raise InputError(f"presence must have shape (T, {n}), got {presence.shape}")
        T = presence.shape[0]
        if adjacency.shape != (T, n, n):
            raise InputError(f"adjacency must have shape ({T}, {n}, {n}), got {adjacency.shape}")
        if (adjacency != adjacency.transpose(0, 2, 1)).any():
            raise InputError("adjacency must be symmetric")
        if adjacency[:, np.arange(n), np.arange(n)].any():
            raise InputError("self-loops are not allowed")
        both = presence[:, :, None] & presence[:, None, :]
        bad = adjacency & ~both
        if bad.any():
            t, i, j = np.argwhere(bad)[0]
            raise InputError(
                f"edge {node_ids[i]}-{node_ids[j]} at time index {t} touches an absent node")
        for name, arr in (("labels", labels), ("presence", presence), ("adjacency", adjacency)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "node_ids", node_ids)

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[int, str, str]], labels: Mapping[str, int],
                   presence: Sequence[Iterable[str]]) -> "NetworkSeries":
        """Build a series from ``(t, a, b)`` rows with 0-based ``t``.

        Nodes are indexed by first time of presence, then by identifier.
        """
        order: dict[str, int] = {}
        sets = [set(map(str, nodes)) for nodes in presence]
        for nodes in sets:
            for node in sorted(nodes):
                order.setdefault(node, len(order))
        node_ids = tuple(order)
        labels = {str(k): v for k, v in labels.items()}
        missing = [n for n in node_ids if n not in labels]
        if missing:
            raise InputError(f"nodes without a group label: {missing[:5]}")
        T, n = len(sets), len(node_ids)
        pres = np.zeros((T, n), dtype=bool)
        for t, nodes in enumerate(sets):
            pres[t, [order[v] for v in nodes]] = True
        adj = np.zeros((T, n, n), dtype=bool)
        for t, a, b in edges:
            a, b = str(a), str(b)
            if a not in order or b not in order:
                raise InputError(f"edge ({t}, {a}, {b}) references an unknown node")
            if not 0 <= t < T:
                raise InputError(f"edge ({t}, {a}, {b}) has time outside 0..{T - 1}")
            if a == b:
                raise InputError(f"self-loop on {a} at time {t}")
            adj[t, order[a], order[b]] = adj[t, order[b], order[a]] = True
        return cls(node_ids, np.array([labels[v] for v in node_ids]), pres, adj)

    @property
    def T(self) -> int:
        return self.presence.shape[0]

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def index(self, node: str) -> int:
        try:
            return self.node_ids.index(str(node))
        except ValueError:
            raise InputError(f"unknown node identifier {node!r}") from None

    def present(self, t: int) -> list[str]:
        return [self.node_ids[i] for i in np.flatnonzero(self.presence[t])]

    def edges(self, t: int) -> list[tuple[str, str]]:
        i, j = np.nonzero(np.triu(self.adjacency[t], 1))
        return [(self.node_ids[a], self.node_ids[b]) for a, b in zip(i, j)]

    def dyad_count(self, t: int) -> int:
        k = int(self.presence[t].sum())
        return k * (k - 1) // 2

    def n_observations(self) -> int:
        return sum(self.dyad_count(t) for t in range(self.T))

    def __eq__(self, other):
        if not isinstance(other, NetworkSeries):
            return NotImplemented
        return (self.node_ids == other.node_ids
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.presence, other.presence)
                and np.array_equal(self.adjacency, other.adjacency))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LatentTrajectory:
    """Latent positions ``positions[t, i]`` in R^p, defined only where ``presence[t, i]``."""

    positions: np.ndarray
    presence: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        pres = np.asarray(self.presence, dtype=bool)
        if pos.ndim != 3 or pos.shape[:2] != pres.shape:
            raise InputError(
                f"positions shape {pos.shape} inconsistent with presence shape {pres.shape}")
        pos[~pres] = 0.0
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "presence", pres)

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    def position(self, t: int, i: int) -> np.ndarray:
        if not self.presence[t, i]:
            raise InputError(f"node index {i} is absent at time index {t}")
        return self.positions[t, i]

    def transformed(self, Q: np.ndarray) -> "LatentTrajectory":
        return LatentTrajectory(self.positions @ np.asarray(Q).T, self.presence)


@dataclass(frozen=True)
class AttractorPair:
    within: np.ndarray
    between: np.ndarray


# --- scalar building blocks ---------------------------------------------------------

def _check_node(i, n):
    if not (isinstance(i, (int, np.integer)) and 0 <= i < n):
        raise InputError(f"unknown node index {i!r}")


def neighbor_sets(adjacency: np.ndarray, labels: np.ndarray, i: int) -> tuple[set, set]:
    """Neighbors of ``i`` split into same-group and other-group sets."""
    adjacency = np.asarray(adjacency, dtype=bool)
    labels = np.asarray(labels)
    _check_node(i, len(labels))
    nbrs = np.flatnonzero(adjacency[i])
    nbrs = nbrs[nbrs != i]
    same = {int(j) for j in nbrs if labels[j] == labels[i]}
    other = {int(j) for j in nbrs if labels[j] != labels[i]}
    return same, other


def attractors(z_prev: np.ndarray, adjacency_prev: np.ndarray, labels: np.ndarray,
               i: int, presence_prev: np.ndarray | None = None) -> AttractorPair:
    """Offsets of ``z_prev[i]`` from the means of its same- and other-group neighbors.

    An empty neighbor set yields an exact zero vector.
    """
    z_prev = np.asarray(z_prev, dtype=float)
    same, other = neighbor_sets(adjacency_prev, labels, i)
    if presence_prev is not None:
        missing = [j for j in same | other | {i} if not presence_prev[j]]
        if missing:
            raise NumericError(f"no latent position for node indices {sorted(missing)}")

    def pull(group):
        if not group:
            return np.zeros(z_prev.shape[1])
        return z_prev[sorted(group)].mean(axis=0) - z_prev[i]

    return AttractorPair(within=pull(same), between=pull(other))


def transition_mean(z_prev, adjacency_prev, labels, params: GlobalParams, i: int) -> np.ndarray:
    """Mean of a retained node's next position under the attractor dynamics."""
    pair = attractors(z_prev, adjacency_prev, labels, i)
    labels = np.asarray(labels)
    return (np.asarray(z_prev, dtype=float)[i]
            + params.gamma_w(int(labels[i])) * pair.within
            + params.gamma_b * pair.between)


def entering_node_mean(z_prev, labels, presence_prev, i: int) -> np.ndarray:
    """Prior mean for a node entering at ``t``: its group's mean position at ``t-1``.

    Falls back to the origin when no member of the group was present.
    """
    z_prev = np.asarray(z_prev, dtype=float)
    labels = np.asarray(labels)
    _check_node(i, len(labels))
    members = np.asarray(presence_prev, dtype=bool) & (labels == labels[i])
    if not members.any():
        return np.zeros(z_prev.shape[1])
    return z_prev[members].mean(axis=0)


def edge_logit(params: GlobalParams, z_i, z_j, prev_edge: int | None = None) -> float:
    z_i = np.asarray(z_i, dtype=float)
    z_j = np.asarray(z_j, dtype=float)
    if z_i.shape != z_j.shape or z_i.ndim != 1:
        raise InputError(f"position shapes differ: {z_i.shape} vs {z_j.shape}")
    logit = params.alpha - float(np.linalg.norm(z_i - z_j))
    if prev_edge is not None:
        logit += params.delta * prev_edge
    return logit


def log_bernoulli(y, logit):
    """Stable Bernoulli log-mass in terms of the logit."""
    return np.where(y, -np.logaddexp(0.0, -logit), -np.logaddexp(0.0, logit))


# --- parameter layouts --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ParamLayout:
    """Maps a free parameter vector onto per-time copies of the five global parameters.

    ``index[t, k]`` is the free-vector position feeding parameter ``PARAM_NAMES[k]``
    at time index ``t``.  A constant layout has one copy of each parameter; a
    segmented layout duplicates the split parameters on either side of a change-point.
    """

    names: tuple
    base: tuple
    index: np.ndarray

    @classmethod
    def constant(cls, T: int) -> "ParamLayout":
        index = np.tile(np.arange(len(PARAM_NAMES)), (T, 1))
        return cls(PARAM_NAMES, PARAM_NAMES, index)

    @classmethod
    def segmented(cls, T: int, changepoint: int,
                  split: Sequence[str] = ("gamma_w1", "gamma_w2", "gamma_b")) -> "ParamLayout":
        """Two segments: times ``1..changepoint-1`` and ``changepoint..T`` (1-based)."""
        if not 2 <= changepoint <= T - 1:
            raise InputError(f"changepoint must lie in [2, {T - 1}], got {changepoint}")
        unknown = set(split) - set(PARAM_NAMES)
        if unknown:
            raise InputError(f"unknown parameters to split: {sorted(unknown)}")
        names, base = [], []
        index = np.zeros((T, len(PARAM_NAMES)), dtype=np.int64)
        second = np.arange(T) >= changepoint - 1
        for k, name in enumerate(PARAM_NAMES):
            if name in split:
                index[~second, k] = len(names)
                names.append(f"{name}[1]")
                base.append(name)
                index[second, k] = len(names)
                names.append(f"{name}[2]")
                base.append(name)
            else:
                index[:, k] = len(names)
                names.append(name)
                base.append(name)
        return cls(tuple(names), tuple(base), index)

    @property
    def size(self) -> int:
        return len(self.names)

    def expand(self, free: np.ndarray) -> np.ndarray:
        return np.asarray(free, dtype=float)[self.index]

    def collapse(self, per_time: np.ndarray) -> np.ndarray:
        out = np.zeros(self.size)
        np.add.at(out, self.index, per_time)
        return out

    def prior_arrays(self, hyper: VarianceHyperparams) -> tuple[np.ndarray, np.ndarray]:
        mean = np.array([hyper.prior_mean[b] for b in self.base], dtype=float)
        var = np.array([hyper.prior_var[b] for b in self.base], dtype=float)
        return mean, var


# --- vectorized evaluation ------------------------------------------------------------

class SeriesStructure:
    """Data-dependent arrays reused by every evaluation of the posterior."""

    def __init__(self, series: NetworkSeries, delta_rule: str = "both_present"):
        if delta_rule not in DELTA_RULES:
            raise InputError(f"delta_rule must be one of {DELTA_RULES}, got {delta_rule!r}")
        self.series = series
        self.delta_rule = delta_rule
        pres = series.presence
        T, N = pres.shape
        self.T, self.N = T, N
        self.presence = pres
        self.group1 = series.labels == 1
        off_diag = ~np.eye(N, dtype=bool)
        self.dyads = pres[:, :, None] & pres[:, None, :] & off_diag
        self.Y = series.adjacency.astype(float)
        self.prev_edge = np.zeros((T, N, N))
        self.retained = np.zeros((T, N), dtype=bool)
        self.entering = np.zeros((T, N), dtype=bool)
        for t in range(1, T):
            both_prev = pres[t - 1][:, None] & pres[t - 1][None, :]
            use = both_prev if delta_rule == "both_present" else ~both_prev
            self.prev_edge[t] = self.Y[t - 1] * use * self.dyads[t]
            self.retained[t] = pres[t] & pres[t - 1]
            self.entering[t] = pres[t] & ~pres[t - 1]
        same = self.group1[:, None] == self.group1[None, :]
        self.W_same = np.zeros((T, N, N))
        self.W_between = np.zeros((T, N, N))
        self.has_same = np.zeros((T, N), dtype=bool)
        self.has_between = np.zeros((T, N), dtype=bool)
        self.group_counts = np.zeros((T, 2))
        for t in range(T):
            for W, has, mask in ((self.W_same, self.has_same, same),
                                 (self.W_between, self.has_between, ~same)):
                A = self.Y[t] * mask
                deg = A.sum(axis=1)
                has[t] = deg > 0
                W[t] = A / np.where(deg > 0, deg, 1.0)[:, None]
            self.group_counts[t] = [(pres[t] & self.group1).sum(), (pres[t] & ~self.group1).sum()]
        self.n_latent_terms = int(pres.sum())
        self.n_edge_terms = int(self.dyads.sum() // 2)
        self.upper = np.triu(np.ones((N, N), dtype=bool), 1)

    def group_means(self, Z: np.ndarray, t: int) -> np.ndarray:
        """Per-group mean positions at time ``t`` (zero for an empty group), shape (2, p)."""
        out = np.zeros((2, Z.shape[2]))
        for g, mask in enumerate((self.group1, ~self.group1)):
            members = self.presence[t] & mask
            if members.any():
                out[g] = Z[t, members].mean(axis=0)
        return out

    def attractor_arrays(self, Z: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Within and between attractors of every node at time index ``t``."""
        A_w = self.W_same[t] @ Z[t] - self.has_same[t][:, None] * Z[t]
        A_b = self.W_between[t] @ Z[t] - self.has_between[t][:, None] * Z[t]
        return A_w, A_b

    @staticmethod
    def distances(Z: np.ndarray, t: int) -> np.ndarray:
        Zt = Z[t]
        sq = np.zeros((Zt.shape[0], Zt.shape[0]))
        for k in range(Zt.shape[1]):
            d = Zt[:, k, None] - Zt[None, :, k]
            sq += d * d
        return np.sqrt(sq)


def posterior_terms(struct: SeriesStructure, layout: ParamLayout, free: np.ndarray,
                    Z: np.ndarray, hyper: VarianceHyperparams) -> dict[str, float]:
    """Log-posterior split into its named components (each summed over time)."""
    theta = layout.expand(free)
    p = Z.shape[2]
    terms = {"edge": 0.0, "transition": 0.0, "entering": 0.0, "initial": 0.0, "prior": 0.0}
    for t in range(struct.T):
        alpha, delta, gw1, gw2, gb = theta[t]
        dist = struct.distances(Z, t)
        logit = alpha + delta * struct.prev_edge[t] - dist
        ll = log_bernoulli(struct.Y[t] > 0, logit)
        edge_t = float(ll[struct.dyads[t] & struct.upper].sum())
        if t == 0:
            sq = (Z[0, struct.presence[0]] ** 2).sum()
            n0 = int(struct.presence[0].sum())
            latent = {"initial": -0.5 * sq / hyper.tau2 - 0.5 * n0 * p * (_LOG_2PI + np.log(hyper.tau2))}
        else:
            A_w, A_b = struct.attractor_arrays(Z, t - 1)
            gw = np.where(struct.group1, gw1, gw2)[:, None]
            resid = Z[t] - (Z[t - 1] + gw * A_w + gb * A_b)
            kept = struct.retained[t]
            trans = (-0.5 * (resid[kept] ** 2).sum() / hyper.sigma2
                     - 0.5 * kept.sum() * p * (_LOG_2PI + np.log(hyper.sigma2)))
            means = struct.group_means(Z, t - 1)
            new = struct.entering[t]
            resid_new = Z[t] - np.where(struct.group1[:, None], means[0], means[1])
            enter = (-0.5 * (resid_new[new] ** 2).sum() / hyper.phi2
                     - 0.5 * new.sum() * p * (_LOG_2PI + np.log(hyper.phi2)))
            latent = {"transition": float(trans), "entering": float(enter)}
        for name, value in dict(latent, edge=edge_t).items():
            if not np.isfinite(value):
                raise NumericError(f"non-finite {name} term at time index {t}")
            terms[name] += float(value)
    mean, var = layout.prior_arrays(hyper)
    free = np.asarray(free, dtype=float)
    prior = -0.5 * ((free - mean) ** 2 / var).sum() - 0.5 * (_LOG_2PI + np.log(var)).sum()
    if not np.isfinite(prior):
        raise NumericError("non-finite prior term on the global parameters")
    terms["prior"] = float(prior)
    return terms


def log_posterior(series: NetworkSeries, latent: LatentTrajectory, params: GlobalParams,
                  hyper: VarianceHyperparams | None = None, delta_rule: str = "both_present",
                  struct: SeriesStructure | None = None) -> float:
    """Unnormalized log posterior of latent positions and global parameters given the series."""
    hyper = hyper or VarianceHyperparams()
    if not np.array_equal(latent.presence, series.presence):
        raise InputError("latent trajectory presence does not match the network series")
    struct = struct or SeriesStructure(series, delta_rule)
    layout = ParamLayout.constant(series.T)
    terms = posterior_terms(struct, layout, params.to_array(), latent.positions, hyper)
    return sum(terms.values())
