"""CSV/JSON readers and writers for network series, fits and derived tables.

File formats
------------
edges.csv
    ``time,node_a,node_b`` with 1-based integer times.  Rows are undirected;
    repeated rows (in either orientation) are dropped with a warning.
nodes.csv
    Either ``node,group,first_time,last_time`` (one presence interval per node)
    or ``node,group,time`` (one row per node per time it is present).
times.csv (optional)
    ``time,label`` mapping internal times to user labels such as years.

Floats in CSV files are written with 17 significant digits.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError, NumericError
from .model import LatentTrajectory, NetworkSeries, ParamLayout, VarianceHyperparams
from .optimizer import FitResult
from .simulate import DENSITY_COLUMNS, empirical_edge_density

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EDGE_HEADER = ("time", "node_a", "node_b")
INTERVAL_HEADER = ("node", "group", "first_time", "last_time")
PRESENCE_HEADER = ("node", "group", "time")
TIME_HEADER = ("time", "label")


def fmt(value) -> str:
    """Lossless text form of a number: integers as-is, floats with 17 significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if not math.isfinite(value):
            raise NumericError(f"refusing to write non-finite value {value}")
        return f"{float(value):.17g}"
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise NumericError(f"refusing to write non-finite value {obj}")
        return float(obj)
    return obj


def dumps_json(doc) -> str:
    """Deterministic JSON text (sorted keys, shortest round-trip float repr)."""
    return json.dumps(_plain(doc), indent=2, sort_keys=True) + "\n"


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = dumps_json(doc)
    path.write_text(text)
    return path


# --- reading ---------------------------------------------------------------------------

def _rows(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    """Header and ``(line_number, fields)`` rows of a CSV file, skipping blank lines."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: file not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        rows = [(reader.line_num, [f.strip() for f in row]) for row in reader if any(f.strip() for f in row)]
    return header, rows


def _int(text: str, path, line: int, column: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise InputError(f"{path}:{line}: {column} must be an integer, got {text!r}") from None


@dataclass
class IngestInfo:
    duplicate_edges: int
    time_labels: tuple


def read_nodes(path) -> tuple[list[str], dict[str, int], dict[str, set]]:
    """Node order, group labels and the set of 1-based times each node is present."""
    header, rows = _rows(path)
    if tuple(header) == INTERVAL_HEADER:
        interval = True
    elif tuple(header) == PRESENCE_HEADER:
        interval = False
    else:
        raise InputError(f"{path}:1: node header must be {','.join(INTERVAL_HEADER)} "
                         f"or {','.join(PRESENCE_HEADER)}, got {','.join(header)}")
    order: list[str] = []
    groups: dict[str, int] = {}
    times: dict[str, set] = {}
    for line, fields in rows:
        if len(fields) != len(header):
            raise InputError(f"{path}:{line}: expected {len(header)} fields, got {len(fields)}")
        node = fields[0]
        if not node:
            raise InputError(f"{path}:{line}: empty node identifier")
        group = _int(fields[1], path, line, "group")
        if group not in (1, 2):
            raise InputError(f"{path}:{line}: group of {node!r} must be 1 or 2, got {group}")
        if node in groups and groups[node] != group:
            raise InputError(f"{path}:{line}: node {node!r} declared with two groups")
        if interval:
            if node in groups:
                raise InputError(f"{path}:{line}: node {node!r} declared twice")
            first = _int(fields[2], path, line, "first_time")
            last = _int(fields[3], path, line, "last_time")
            if not 1 <= first <= last:
                raise InputError(f"{path}:{line}: node {node!r} has invalid interval [{first}, {last}]")
            present = set(range(first, last + 1))
        else:
            t = _int(fields[2], path, line, "time")
            if t < 1:
                raise InputError(f"{path}:{line}: time must be >= 1, got {t}")
            present = {t}
        if node not in groups:
            order.append(node)
            groups[node] = group
            times[node] = set()
        times[node] |= present
    if not order:
        raise InputError(f"{path}: no nodes declared")
    return order, groups, times


def read_time_labels(path, T: int) -> tuple:
    header, rows = _rows(path)
    if tuple(header) != TIME_HEADER:
        raise InputError(f"{path}:1: time-label header must be {','.join(TIME_HEADER)}")
    labels: dict[int, str] = {}
    for line, fields in rows:
        if len(fields) != 2:
            raise InputError(f"{path}:{line}: expected 2 fields, got {len(fields)}")
        t = _int(fields[0], path, line, "time")
        if not 1 <= t <= T or t in labels:
            raise InputError(f"{path}:{line}: time {t} is duplicated or outside 1..{T}")
        labels[t] = fields[1]
    if sorted(labels) != list(range(1, T + 1)):
        raise InputError(f"{path}: labels must cover every time 1..{T}")
    return tuple(labels[t] for t in range(1, T + 1))


def load_series(edge_file, node_file, time_file=None) -> tuple[NetworkSeries, IngestInfo]:
    """Parse and validate a network series; nodes keep the node file's order."""
    order, groups, times = read_nodes(node_file)
    T = max(max(s) for s in times.values())
    occupied = set().union(*times.values())
    gaps = [t for t in range(1, T + 1) if t not in occupied]
    if gaps:
        raise InputError(f"{node_file}: times must be contiguous from 1 to {T}; "
                         f"no node is present at {gaps}")
    index = {node: k for k, node in enumerate(order)}
    n = len(order)
    presence = np.zeros((T, n), dtype=bool)
    for node, ts in times.items():
        presence[[t - 1 for t in ts], index[node]] = True
    adjacency = np.zeros((T, n, n), dtype=bool)
    header, rows = _rows(edge_file)
    if tuple(header) != EDGE_HEADER:
        raise InputError(f"{edge_file}:1: edge header must be {','.join(EDGE_HEADER)}, "
                         f"got {','.join(header)}")
    duplicates = 0
    for line, fields in rows:
        if len(fields) != 3:
            raise InputError(f"{edge_file}:{line}: expected 3 fields, got {len(fields)}")
        t = _int(fields[0], edge_file, line, "time")
        a, b = fields[1], fields[2]
        for node in (a, b):
            if node not in index:
                raise InputError(f"{edge_file}:{line}: undeclared node {node!r}")
        if a == b:
            raise InputError(f"{edge_file}:{line}: self-loop on {a!r}")
        if not 1 <= t <= T:
            raise InputError(f"{edge_file}:{line}: time {t} outside 1..{T}")
        i, j = index[a], index[b]
        for node, k in ((a, i), (b, j)):
            if not presence[t - 1, k]:
                raise InputError(f"{edge_file}:{line}: node {node!r} is not present at time {t}")
        if adjacency[t - 1, i, j]:
            duplicates += 1
        adjacency[t - 1, i, j] = adjacency[t - 1, j, i] = True
    if duplicates:
        warnings.warn(f"{edge_file}: dropped {duplicates} duplicate edge rows", stacklevel=2)
    labels = read_time_labels(time_file, T) if time_file else tuple(str(t) for t in range(1, T + 1))
    series = NetworkSeries(tuple(order), np.array([groups[v] for v in order]), presence, adjacency)
    return series, IngestInfo(duplicates, labels)


def ingest(edge_file, node_file, time_file=None) -> NetworkSeries:
    """Read an edge list and node file into a validated :class:`NetworkSeries`."""
    return load_series(edge_file, node_file, time_file)[0]


def _is_interval(col: np.ndarray) -> bool:
    idx = np.flatnonzero(col)
    return idx.size > 0 and idx[-1] - idx[0] + 1 == idx.size


def write_series(series: NetworkSeries, directory, time_labels: Sequence[str] | None = None) -> dict:
    """Write ``edges.csv`` and ``nodes.csv`` (plus ``times.csv`` when labels are given).

    The node file uses the interval layout when every node's presence is one
    contiguous run and per-time rows otherwise.
    """
    directory = Path(directory)
    out = {}
    edges = ((t + 1, a, b) for t in range(series.T) for a, b in series.edges(t))
    out["edges"] = write_csv(directory / "edges.csv", EDGE_HEADER, edges)
    pres = series.presence
    if all(_is_interval(pres[:, i]) for i in range(series.n_nodes)):
        rows = []
        for i, node in enumerate(series.node_ids):
            idx = np.flatnonzero(pres[:, i])
            rows.append((node, series.labels[i], idx[0] + 1, idx[-1] + 1))
        out["nodes"] = write_csv(directory / "nodes.csv", INTERVAL_HEADER, rows)
    else:
        rows = [(node, series.labels[i], t + 1)
                for i, node in enumerate(series.node_ids) for t in np.flatnonzero(pres[:, i])]
        out["nodes"] = write_csv(directory / "nodes.csv", PRESENCE_HEADER, rows)
    if time_labels is not None:
        if len(time_labels) != series.T:
            raise InputError(f"need {series.T} time labels, got {len(time_labels)}")
        out["times"] = write_csv(directory / "times.csv", TIME_HEADER,
                                 ((t + 1, lab) for t, lab in enumerate(time_labels)))
    return out


# --- result tables ---------------------------------------------------------------------

def _time_label(labels, t: int):
    return labels[t] if labels is not None else t + 1


def group_mean_positions(positions: np.ndarray, presence: np.ndarray, labels: np.ndarray):
    """``(t, group, mean)`` for every time and group with at least one present member."""
    out = []
    for t in range(presence.shape[0]):
        for g in (1, 2):
            members = presence[t] & (labels == g)
            if members.any():
                out.append((t, g, positions[t, members].mean(axis=0)))
    return out


def export_trajectory_summaries(fit, series: NetworkSeries, directory,
                                time_labels: Sequence[str] | None = None) -> dict:
    """Positions per node, group-mean positions and edge densities per time as CSV."""
    directory = Path(directory)
    Z = fit.latent_hat.positions
    p = Z.shape[2]
    coords = tuple(f"z{k + 1}" for k in range(p))
    pres = series.presence
    rows = [(_time_label(time_labels, t), series.node_ids[i], series.labels[i], *Z[t, i])
            for t in range(series.T) for i in np.flatnonzero(pres[t])]
    out = {"positions": write_csv(directory / "positions.csv", ("time", "node", "group") + coords, rows)}
    means = [(_time_label(time_labels, t), g, *m)
             for t, g, m in group_mean_positions(Z, pres, series.labels)]
    out["group_means"] = write_csv(directory / "group_means.csv", ("time", "group") + coords, means)
    dens = empirical_edge_density(series)
    out["density"] = write_csv(directory / "density.csv", ("time",) + DENSITY_COLUMNS,
                               ((_time_label(time_labels, t), *dens[t]) for t in range(series.T)))
    return out


def write_trace(trace, path) -> Path:
    return write_csv(path, ("iteration", "log_posterior", "update_norm"),
                     ((r.iteration, r.log_posterior, "" if not np.isfinite(r.update_norm) else r.update_norm)
                      for r in trace))


def fit_document(fit) -> dict:
    return {
        "schema": f"clsna.fit/{SCHEMA_VERSION}",
        "params": dict(fit.free_params),
        "log_posterior": fit.final_log_posterior,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "latent_dim": fit.latent_hat.dim,
        "delta_rule": fit.delta_rule,
    }


def save_fit(fit, directory) -> Path:
    """Full fit state: ``params.json`` plus the latent array in ``latent.npy``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = fit_document(fit)
    doc["layout"] = {"names": list(fit.layout.names), "base": list(fit.layout.base),
                     "index": fit.layout.index.tolist()}
    doc["hyper"] = {"tau2": fit.hyper.tau2, "phi2": fit.hyper.phi2, "sigma2": fit.hyper.sigma2,
                    "prior_mean": fit.hyper.prior_mean, "prior_var": fit.hyper.prior_var}
    path = write_json(directory / "params.json", doc)
    with open(directory / "latent.npy", "wb") as fh:
        np.save(fh, fit.latent_hat.positions, allow_pickle=False)
    return path


def load_fit(directory, series: NetworkSeries):
    """Inverse of :func:`save_fit` for a fit of ``series``."""
    directory = Path(directory)
    try:
        doc = json.loads((directory / "params.json").read_text())
        Z = np.load(directory / "latent.npy", allow_pickle=False)
        layout = ParamLayout(tuple(doc["layout"]["names"]), tuple(doc["layout"]["base"]),
                             np.asarray(doc["layout"]["index"], dtype=np.int64))
        hyper = VarianceHyperparams(**doc["hyper"])
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise InputError(f"{directory}: cannot load fit ({exc})") from None
    if Z.shape[:2] != series.presence.shape:
        raise InputError(f"{directory}: latent array shape {Z.shape} does not match the series")
    return FitResult(dict(doc["params"]), LatentTrajectory(Z, series.presence), doc["log_posterior"],
                     doc["iterations"], doc["converged"], [], layout, hyper, doc["delta_rule"])


def write_table(path, rows: Sequence[Mapping]) -> Path:
    """CSV from a list of homogeneous dicts."""
    if not rows:
        raise InputError(f"{path}: nothing to write")
    header = list(rows[0])
    return write_csv(path, header, ([r[h] for h in header] for r in rows))

