"""Forward simulation of the two-group CLSNA model, including node entry and exit."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .model import GlobalParams, LatentTrajectory, NetworkSeries, VarianceHyperparams


@dataclass(frozen=True)
class Churn:
    """Random presence schedule.

    Each node is present at the first time with probability ``initial``; afterwards
    an absent node enters with probability ``enter`` and a present node leaves with
    probability ``exit``.
    """

    initial: float = 0.8
    enter: float = 0.2
    exit: float = 0.1


@dataclass(frozen=True)
class ScenarioSpec:
    n: int
    T: int
    params: GlobalParams
    p: int = 2
    hyper: VarianceHyperparams = field(default_factory=VarianceHyperparams)
    group_split: float = 0.5
    churn: Churn | np.ndarray | None = None
    seed: int = 0
    changepoint: int | None = None
    params_after: GlobalParams | None = None

    def __post_init__(self):
        if self.n < 2 or self.T < 1 or self.p < 1:
            raise InputError(f"need n >= 2, T >= 1, p >= 1; got n={self.n}, T={self.T}, p={self.p}")
        if not 0 < self.group_split < 1:
            raise InputError(f"group_split must lie in (0, 1), got {self.group_split}")
        if (self.changepoint is None) != (self.params_after is None):
            raise InputError("changepoint and params_after must be given together")
        if self.changepoint is not None and not 2 <= self.changepoint <= self.T:
            raise InputError(f"changepoint must lie in [2, {self.T}], got {self.changepoint}")
        if isinstance(self.churn, np.ndarray):
            pres = np.asarray(self.churn, dtype=bool)
            if pres.shape != (self.T, self.n):
                raise InputError(f"explicit presence must have shape ({self.T}, {self.n})")
            if not pres.any(axis=1).all():
                raise InputError("explicit presence leaves a time step empty")

    def params_at(self, t: int) -> GlobalParams:
        """Parameters in force at 0-based time ``t``."""
        if self.changepoint is not None and t >= self.changepoint - 1:
            return self.params_after
        return self.params


def flocking_spec(n: int = 100, seed: int = 0, **kw) -> ScenarioSpec:
    """Flocking design: attraction within and between groups."""
    return ScenarioSpec(n=n, T=kw.pop("T", 10),
                        params=GlobalParams(alpha=1.0, delta=2.0, gamma_w1=0.25, gamma_w2=0.25,
                                            gamma_b=0.5), seed=seed, **kw)


def polarization_spec(n: int = 100, seed: int = 0, **kw) -> ScenarioSpec:
    """Polarization design: attraction within groups, repulsion between them."""
    return ScenarioSpec(n=n, T=kw.pop("T", 10),
                        params=GlobalParams(alpha=1.0, delta=3.0, gamma_w1=0.45, gamma_w2=0.45,
                                            gamma_b=-0.5), seed=seed, **kw)


def _presence(spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.churn is None:
        return np.ones((spec.T, spec.n), dtype=bool)
    if isinstance(spec.churn, np.ndarray):
        return np.asarray(spec.churn, dtype=bool).copy()
    churn = spec.churn
    pres = np.zeros((spec.T, spec.n), dtype=bool)
    pres[0] = rng.random(spec.n) < churn.initial
    for t in range(1, spec.T):
        u = rng.random(spec.n)
        pres[t] = np.where(pres[t - 1], u >= churn.exit, u < churn.enter)
    for t in range(spec.T):
        if not pres[t].any():
            pres[t, rng.integers(spec.n)] = True
    return pres


def simulate(spec: ScenarioSpec) -> tuple[NetworkSeries, LatentTrajectory]:
    """Draw a network series and its latent trajectory from the generative model."""
    rng = np.random.default_rng(spec.seed)
    n, T, p, hyper = spec.n, spec.T, spec.p, spec.hyper
    n1 = int(round(spec.group_split * n))
    labels = np.where(np.arange(n) < n1, 1, 2)
    group1 = labels == 1
    pres = _presence(spec, rng)
    Z = np.zeros((T, n, p))
    Y = np.zeros((T, n, n), dtype=bool)
    iu = np.triu_indices(n, 1)
    for t in range(T):
        theta = spec.params_at(t)
        if t == 0:
            Z[0] = rng.normal(0.0, np.sqrt(hyper.tau2), (n, p))
        else:
            prev = pres[t - 1]
            A = Y[t - 1].astype(float)
            same = group1[:, None] == group1[None, :]
            mu = Z[t - 1].copy()
            for mask, coef in ((same, np.where(group1, theta.gamma_w1, theta.gamma_w2)),
                               (~same, np.full(n, theta.gamma_b))):
                nb = A * mask
                deg = nb.sum(axis=1)
                pull = np.where(deg[:, None] > 0,
                                nb @ Z[t - 1] / np.maximum(deg, 1)[:, None] - Z[t - 1], 0.0)
                mu += coef[:, None] * pull
            retained = pres[t] & prev
            Z[t, retained] = mu[retained] + rng.normal(0.0, np.sqrt(hyper.sigma2),
                                                        (retained.sum(), p))
            for mask in (group1, ~group1):
                members = prev & mask
                centre = Z[t - 1, members].mean(axis=0) if members.any() else np.zeros(p)
                new = pres[t] & ~prev & mask
                Z[t, new] = centre + rng.normal(0.0, np.sqrt(hyper.phi2), (new.sum(), p))
        Z[t, ~pres[t]] = 0.0
        dist = np.linalg.norm(Z[t][:, None, :] - Z[t][None, :, :], axis=2)
        logit = theta.alpha - dist
        if t > 0:
            both_prev = pres[t - 1][:, None] & pres[t - 1][None, :]
            logit = logit + theta.delta * (Y[t - 1] & both_prev)
        draw = rng.random((n, n)) < 1.0 / (1.0 + np.exp(-logit))
        both = pres[t][:, None] & pres[t][None, :]
        upper = np.zeros((n, n), dtype=bool)
        upper[iu] = draw[iu] & both[iu]
        Y[t] = upper | upper.T
    node_ids = tuple(f"v{i}" for i in range(n))
    return NetworkSeries(node_ids, labels, pres, Y), LatentTrajectory(Z, pres)


DENSITY_COLUMNS = ("within_group1", "within_group2", "between", "overall")


def empirical_edge_density(series: NetworkSeries) -> np.ndarray:
    """Edge density per time for the three dyad categories and overall, shape (T, 4).

    A category with no present dyads at some time gets density 0.
    """
    g1 = series.labels == 1
    out = np.zeros((series.T, 4))
    for t in range(series.T):
        pres = series.presence[t]
        upper = np.triu(pres[:, None] & pres[None, :], 1)
        cats = (upper & g1[:, None] & g1[None, :],
                upper & ~g1[:, None] & ~g1[None, :],
                upper & (g1[:, None] != g1[None, :]),
                upper)
        A = series.adjacency[t]
        for k, mask in enumerate(cats):
            total = mask.sum()
            out[t, k] = A[mask].sum() / total if total else 0.0
    return out

