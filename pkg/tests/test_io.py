import csv
import json
from pathlib import Path

import numpy as np
import pytest

from clsna import io
from clsna.config import env_overrides, from_dict, load_config
from clsna.errors import InputError, NumericError
from clsna.optimizer import OptimizerConfig, fit_map
from clsna.simulate import Churn, empirical_edge_density, flocking_spec, simulate

FIXTURES = Path(__file__).parent / "fixtures"


def write(path, text):
    path.write_text(text)
    return path


def test_two_node_example(tmp_path):
    e = write(tmp_path / "e.csv", "time,node_a,node_b\n1,a,b\n")
    n = write(tmp_path / "n.csv", "node,group,first_time,last_time\na,1,1,1\nb,2,1,1\n")
    s = io.ingest(e, n)
    assert s.T == 1 and s.node_ids == ("a", "b") and s.edges(0) == [("a", "b")]


def test_undeclared_node_cites_line(tmp_path):
    e = write(tmp_path / "e.csv", "time,node_a,node_b\n1,a,b\n1,a,x9\n")
    n = write(tmp_path / "n.csv", "node,group,first_time,last_time\na,1,1,1\nb,2,1,1\n")
    with pytest.raises(InputError, match=r"e\.csv:3: undeclared node 'x9'"):
        io.ingest(e, n)


@pytest.mark.parametrize("edges, message", [
    ("1,a,a\n", "self-loop"),
    ("2,a,b\n", "not present at time 2"),
    ("5,a,b\n", "outside"),
    ("x,a,b\n", "integer"),
])
def test_invalid_edge_rows(tmp_path, edges, message):
    e = write(tmp_path / "e.csv", "time,node_a,node_b\n" + edges)
    n = write(tmp_path / "n.csv", "node,group,first_time,last_time\na,1,1,2\nb,2,1,1\n")
    with pytest.raises(InputError, match=message):
        io.ingest(e, n)


def test_time_gap_rejected(tmp_path):
    e = write(tmp_path / "e.csv", "time,node_a,node_b\n")
    n = write(tmp_path / "n.csv", "node,group,time\na,1,1\nb,2,1\na,1,3\n")
    with pytest.raises(InputError, match="contiguous"):
        io.ingest(e, n)


def test_bad_headers_and_groups(tmp_path):
    e = write(tmp_path / "e.csv", "t,a,b\n")
    n = write(tmp_path / "n.csv", "node,group,first_time,last_time\na,1,1,1\nb,2,1,1\n")
    with pytest.raises(InputError, match="header"):
        io.ingest(e, n)
    n2 = write(tmp_path / "n2.csv", "node,group,first_time,last_time\na,3,1,1\n")
    with pytest.raises(InputError, match="n2.csv:2"):
        io.read_nodes(n2)


def test_duplicates_are_dropped_with_warning(tmp_path):
    e = write(tmp_path / "e.csv", "time,node_a,node_b\n1,a,b\n1,b,a\n1,a,b\n")
    n = write(tmp_path / "n.csv", "node,group,first_time,last_time\na,1,1,1\nb,2,1,1\n")
    with pytest.warns(UserWarning, match="2 duplicate"):
        s, info = io.load_series(e, n)
    assert info.duplicate_edges == 2 and s.edges(0) == [("a", "b")]


def test_x_shaped_fixture_counts():
    d = FIXTURES / "x_shaped"
    s, info = io.load_series(d / "edges.csv", d / "nodes.csv", d / "times.csv")
    # declared counts, recounted directly from the presence rows
    with open(d / "counts.csv") as fh:
        declared = {row["label"]: int(row["active_nodes"]) for row in csv.DictReader(fh)}
    recount: dict = {}
    with open(d / "nodes.csv") as fh:
        for row in csv.DictReader(fh):
            recount[row["time"]] = recount.get(row["time"], 0) + 1
    assert s.T == 11
    assert info.time_labels == tuple(str(y) for y in range(2010, 2021))
    assert [recount[str(t)] for t in range(1, 12)] == list(declared.values())
    assert s.presence.sum(axis=1).tolist() == [declared[lab] for lab in info.time_labels]


@pytest.mark.parametrize("churn", [None, Churn(initial=0.6, enter=0.3, exit=0.3)])
def test_write_ingest_round_trip(tmp_path, churn):
    series, _ = simulate(flocking_spec(n=15, T=4, seed=3, churn=churn))
    labels = [f"y{t}" for t in range(4)]
    files = io.write_series(series, tmp_path, labels)
    back, info = io.load_series(files["edges"], files["nodes"], files["times"])
    assert back == series
    assert info.time_labels == tuple(labels)


def test_fmt_is_lossless_and_finite():
    x = 0.1 + 0.2
    assert float(io.fmt(x)) == x
    assert io.fmt(np.int64(3)) == "3" and io.fmt(True) == "true"
    with pytest.raises(NumericError):
        io.fmt(float("nan"))
    with pytest.raises(NumericError):
        io.dumps_json({"a": float("inf")})


def test_group_mean_example():
    Z = np.zeros((1, 4, 2))
    Z[0, :2] = 1.0
    Z[0, 2:] = [[-1.0, 0.0], [-3.0, 2.0]]
    means = io.group_mean_positions(Z, np.ones((1, 4), bool), np.array([1, 1, 2, 2]))
    np.testing.assert_array_equal(means[0][2], [1.0, 1.0])
    np.testing.assert_array_equal(means[1][2], [-2.0, 1.0])


def test_trajectory_exports(tmp_path):
    series, truth = simulate(flocking_spec(n=10, T=3, seed=1, churn=Churn(0.6, 0.3, 0.3)))
    fit = fit_map(series, (np.array([1.0, 2.0, 0.25, 0.25, 0.5]), truth),
                  OptimizerConfig(max_iters=20))
    files = io.export_trajectory_summaries(fit, series, tmp_path)
    with open(files["positions"]) as fh:
        rows = list(csv.DictReader(fh))
    present = {(int(r["time"]), r["node"]) for r in rows}
    expected = {(t + 1, series.node_ids[i]) for t in range(series.T)
                for i in np.flatnonzero(series.presence[t])}
    assert present == expected
    dens = np.loadtxt(files["density"], delimiter=",", skiprows=1)[:, 1:]
    np.testing.assert_array_equal(dens, empirical_edge_density(series))


def test_fit_save_load_round_trip(tmp_path):
    series, _ = simulate(flocking_spec(n=8, T=3, seed=4))
    fit = fit_map(series, config=OptimizerConfig(max_iters=50))
    io.save_fit(fit, tmp_path)
    back = io.load_fit(tmp_path, series)
    assert back.free_params == fit.free_params
    assert back.final_log_posterior == fit.final_log_posterior
    np.testing.assert_array_equal(back.latent_hat.positions, fit.latent_hat.positions)
    assert back.objective(series).value(back.as_vector()) == fit.final_log_posterior


# --- configuration ---------------------------------------------------------------------

def test_config_defaults():
    cfg = load_config(environ={})
    h = cfg.hyper.build()
    assert (h.tau2, h.phi2, h.sigma2) == (10.0, 10.0, 1.0)
    assert h.prior_mean == {"alpha": 0.0, "delta": 0.0, "gamma_w1": 0.5, "gamma_w2": 0.5,
                            "gamma_b": -0.5}
    assert set(h.prior_var.values()) == {100.0}
    assert (cfg.latent.p_target, cfg.latent.q_over) == (2, 3)


def test_env_overrides(tmp_path):
    path = write(tmp_path / "c.json", json.dumps({"optimizer": {"max_iters": 100}, "seed": 1}))
    env = {"CLSNA_OPTIMIZER__MAX_ITERS": "250", "CLSNA_SEED": "7",
           "CLSNA_SIMULATION__T": "5", "CLSNA_OUTPUT_DIR": "elsewhere", "HOME": "/x"}
    cfg = load_config(path, environ=env)
    assert cfg.optimizer_config().max_iters == 250
    assert cfg.optimizer_config().seed == 7
    assert cfg.simulation.T == 5 and cfg.output_dir == "elsewhere"
    assert env_overrides({"CLSNA_HYPER__TAU2": "2.5"}) == {"hyper": {"tau2": 2.5}}


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"hyper": {"tau": 1}},
    {"optimizer": {"momentum": 2.0}},
    {"optimizer": {"unknown": 1}},
    {"seed": "x"},
    {"hyper": {"tau2": -1.0}},
    {"variance": {"solver": "newton"}},
])
def test_config_validation(doc):
    with pytest.raises(InputError):
        from_dict(doc)


def test_config_file_errors(tmp_path):
    with pytest.raises(InputError, match="invalid JSON"):
        load_config(write(tmp_path / "c.json", "{"), environ={})
    with pytest.raises(InputError):
        load_config(tmp_path / "missing.json", environ={})
