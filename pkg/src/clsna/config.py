"""Declarative run configuration: a JSON file plus environment overrides.

Every key can be overridden through an environment variable named
``CLSNA_<SECTION>__<KEY>`` (or ``CLSNA_<KEY>`` for top-level keys), for example
``CLSNA_OPTIMIZER__MAX_ITERS=2000`` or ``CLSNA_SEED=3``.  Values are parsed as
JSON when possible and taken as plain strings otherwise.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import InputError
from .model import PARAM_NAMES, VarianceHyperparams
from .optimizer import OptimizerConfig

ENV_PREFIX = "CLSNA_"


@dataclass(frozen=True)
class HyperConfig:
    """Latent-process variances and Gaussian priors on the global parameters."""

    tau2: float = 10.0
    phi2: float = 10.0
    sigma2: float = 1.0
    prior_mean: dict = field(default_factory=lambda: {"alpha": 0.0, "delta": 0.0, "gamma_w1": 0.5,
                                                      "gamma_w2": 0.5, "gamma_b": -0.5})
    prior_var: dict = field(default_factory=lambda: {n: 100.0 for n in PARAM_NAMES})

    def build(self) -> VarianceHyperparams:
        return VarianceHyperparams(self.tau2, self.phi2, self.sigma2, dict(self.prior_mean),
                                   dict(self.prior_var))


@dataclass(frozen=True)
class LatentConfig:
    """Final latent dimension and the over-parameterized dimension of the first stage."""

    p_target: int = 2
    q_over: int = 3
    delta_rule: str = "both_present"


@dataclass(frozen=True)
class VarianceConfig:
    """Anchored variance estimation.

    ``eta`` maps a parameter name to a fixed perturbation; parameters not listed
    use ``0.01 * max(1, |mode value|)``.  ``combos`` maps a label to a linear
    combination such as ``"gamma_w1-gamma_b"``.  ``latent_rows`` also exports each
    target's covariance with every latent coordinate.  ``solver`` is ``"lbfgs"``
    or ``"sgd"`` for the mode polish and the anchored optimizations.
    """

    targets: list = field(default_factory=lambda: list(PARAM_NAMES))
    combos: dict = field(default_factory=dict)
    eta: dict = field(default_factory=dict)
    polish: bool = True
    latent_rows: bool = False
    diagnose_target: str = "alpha"
    eta_grid: list = field(default_factory=lambda: [-0.03, -0.02, -0.01, 0.01, 0.02, 0.03])
    solver: str = "lbfgs"

    def __post_init__(self):
        if self.solver not in ("lbfgs", "sgd"):
            raise InputError(f"variance solver must be 'lbfgs' or 'sgd', got {self.solver!r}")


@dataclass(frozen=True)
class SelectionConfig:
    """Change-point scan; ``candidates`` empty means every time in ``2..T-1``."""

    candidates: list = field(default_factory=list)
    split: list = field(default_factory=lambda: ["gamma_w1", "gamma_w2", "gamma_b"])
    likelihood: str = "edge"


@dataclass(frozen=True)
class SimulationConfig:
    """Synthetic data for the ``simulate`` subcommand.

    ``design`` is ``"flocking"`` or ``"polarization"``; ``params`` overrides any of
    the design's global parameters.  With ``changepoint`` set, ``params_after``
    gives the parameters in force from that time on.
    """

    design: str = "flocking"
    n: int = 100
    T: int = 10
    p: int = 2
    group_split: float = 0.5
    params: dict = field(default_factory=dict)
    churn: dict | None = None
    changepoint: int | None = None
    params_after: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RunConfig:
    hyper: HyperConfig = field(default_factory=HyperConfig)
    optimizer: dict = field(default_factory=dict)
    latent: LatentConfig = field(default_factory=LatentConfig)
    variance: VarianceConfig = field(default_factory=VarianceConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    output_dir: str = "out"
    seed: int = 0

    def optimizer_config(self) -> OptimizerConfig:
        """The optimizer settings with the run seed applied unless set explicitly."""
        opts = dict(self.optimizer)
        opts.setdefault("seed", self.seed)
        try:
            return OptimizerConfig(**opts)
        except TypeError as exc:
            raise InputError(f"invalid optimizer settings: {exc}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"hyper": HyperConfig, "latent": LatentConfig, "variance": VarianceConfig,
             "selection": SelectionConfig, "simulation": SimulationConfig}
_OPTIMIZER_KEYS = {f.name for f in dataclasses.fields(OptimizerConfig)}


def _canonical(values: Mapping, known, name: str) -> dict:
    """Map keys onto ``known`` field names ignoring case (environment keys arrive lowercased)."""
    lookup = {k.lower(): k for k in known}
    out = {}
    for key, value in values.items():
        if key not in known and str(key).lower() not in lookup:
            raise InputError(f"unknown key {key!r} in config section {name!r}")
        out[key if key in known else lookup[str(key).lower()]] = value
    return out


def _section(cls, values, name: str):
    if not isinstance(values, Mapping):
        raise InputError(f"config section {name!r} must be an object")
    values = _canonical(values, {f.name for f in dataclasses.fields(cls)}, name)
    try:
        return cls(**values)
    except TypeError as exc:
        raise InputError(f"invalid config section {name!r}: {exc}") from None


def from_dict(doc: Mapping) -> RunConfig:
    """Validated :class:`RunConfig` from a plain mapping; unknown keys are errors."""
    doc = dict(doc)
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - top
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in doc:
            kwargs[name] = _section(cls, doc[name], name)
    if "optimizer" in doc:
        opt = doc["optimizer"]
        if not isinstance(opt, Mapping):
            raise InputError("config section 'optimizer' must be an object")
        kwargs["optimizer"] = _canonical(opt, _OPTIMIZER_KEYS, "optimizer")
    for name in ("output_dir", "seed"):
        if name in doc:
            kwargs[name] = doc[name]
    if not isinstance(kwargs.get("seed", 0), int):
        raise InputError("seed must be an integer")
    cfg = RunConfig(**kwargs)
    cfg.optimizer_config()
    cfg.hyper.build()
    return cfg


def _parse_env_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    """Nested override mapping from ``CLSNA_*`` environment variables."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, text in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX):].split("__")]
        if not all(path):
            raise InputError(f"malformed config variable {key}")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InputError(f"config variable {key} conflicts with another override")
        node[path[-1]] = _parse_env_value(text)
    return out


def _merge(base: dict, update: Mapping) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None, environ: Mapping[str, str] | None = None,
                overrides: Mapping | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then environment, then ``overrides``."""
    doc: dict = {}
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise InputError(f"{path}: cannot read config ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(doc, dict):
            raise InputError(f"{path}: config must be a JSON object")
    doc = _merge(doc, env_overrides(environ))
    if overrides:
        doc = _merge(doc, overrides)
    return from_dict(doc)
