import json

import numpy as np
import pytest

from clsna import io
from clsna.cli import main
from clsna.optimizer import OptimizerConfig, fit_map_staged
from clsna.uncertainty import build_report, parse_combination

SMALL = {"simulation": {"n": 12, "T": 5}, "optimizer": {"max_iters": 8000}, "seed": 2}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    doc = dict(SMALL, variance={"targets": ["gamma_w1", "gamma_b"],
                                "combos": {"diff": "gamma_w1-gamma_b"}})
    cfg.write_text(json.dumps(doc))
    assert main(["simulate", "--config", str(cfg), "--out", str(root / "data")]) == 0
    data = ["--edges", str(root / "data" / "edges.csv"), "--nodes", str(root / "data" / "nodes.csv")]
    assert main(["fit", "--config", str(cfg), "--out", str(root / "fit"), "--deterministic", *data]) == 0
    return root, cfg, data


def test_simulate_artifacts(workspace):
    root, _, _ = workspace
    truth = json.loads((root / "data" / "truth.json").read_text())
    assert truth["params"]["alpha"] == 1.0 and truth["n"] == 12
    assert (root / "data" / "truth_positions.csv").exists()
    assert json.loads((root / "data" / "run.json").read_text())["command"] == "simulate"


def test_fit_matches_library(workspace):
    root, _, data = workspace
    series = io.ingest(root / "data" / "edges.csv", root / "data" / "nodes.csv")
    fit = fit_map_staged(series, config=OptimizerConfig(max_iters=8000, seed=2))
    doc = json.loads((root / "fit" / "params.json").read_text())
    assert doc["params"]["alpha"] == fit.free_params["alpha"]
    assert doc["log_posterior"] == fit.final_log_posterior
    for name in ("positions.csv", "group_means.csv", "density.csv", "trace.csv", "latent.npy"):
        assert (root / "fit" / name).exists()


def test_variance_entries(workspace):
    root, cfg, data = workspace
    out = root / "var"
    assert main(["variance", "--config", str(cfg), "--out", str(out), "--fit", str(root / "fit"),
                 *data]) == 0
    doc = json.loads((out / "uncertainty.json").read_text())
    assert set(doc["variances"]) == {"gamma_w1", "gamma_b"}
    assert set(doc["combinations"]) == {"diff"}
    cov_ab = doc["covariance_rows"]["gamma_w1"]["gamma_b"]
    cov_ba = doc["covariance_rows"]["gamma_b"]["gamma_w1"]
    expected = doc["variances"]["gamma_w1"] + doc["variances"]["gamma_b"] - cov_ab - cov_ba
    assert doc["combinations"]["diff"] == pytest.approx(expected, rel=1e-12)
    # cross-check against the library
    series = io.ingest(root / "data" / "edges.csv", root / "data" / "nodes.csv")
    fit = io.load_fit(root / "fit", series)
    rep = build_report(series, fit, ["gamma_w1", "gamma_b"], {"diff": parse_combination("gamma_w1-gamma_b")},
                       config=OptimizerConfig(max_iters=8000, seed=2))
    assert rep.variances == doc["variances"]


def test_scan_outputs(workspace):
    root, cfg, data = workspace
    out = root / "scan"
    assert main(["scan", "--config", str(cfg), "--out", str(out), "--fit", str(root / "fit"), *data]) == 0
    doc = json.loads((out / "scan.json").read_text())
    assert len(doc["table"]) == 1 + 3  # baseline plus candidates 2..T-1
    header = (out / "scan.csv").read_text().splitlines()[0]
    assert header.startswith("changepoint,bic,converged")


@pytest.mark.parametrize("argv, code", [
    (["fit", "--edges", "missing.csv", "--nodes", "missing.csv"], 2),
    (["frobnicate"], 2),
    (["fit"], 2),
])
def test_error_exit_codes(tmp_path, argv, code):
    out = tmp_path / "err"
    assert main([*argv, "--out", str(out)]) == code
    doc = json.loads((out / "error.json").read_text())
    assert doc["exit_code"] == code and doc["message"]


def test_bad_config_fails_before_compute(tmp_path, workspace):
    root, _, data = workspace
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"optimizer": {"step_latent": -1}}))
    out = tmp_path / "o"
    assert main(["fit", "--config", str(cfg), "--out", str(out), *data]) == 2
    assert not (out / "params.json").exists()


def test_nonconvergence_exit_code(tmp_path, workspace):
    root, _, data = workspace
    cfg = tmp_path / "short.json"
    cfg.write_text(json.dumps({"optimizer": {"max_iters": 20}}))
    out = tmp_path / "o"
    assert main(["fit", "--config", str(cfg), "--out", str(out), *data]) == 4
    assert (out / "params.json").exists()
    assert json.loads((out / "error.json").read_text())["error"] == "ConvergenceError"
    assert main(["fit", "--config", str(cfg), "--out", str(tmp_path / "p"), "--allow-unconverged", *data]) == 0


def test_csv_values_finite(workspace):
    root, _, _ = workspace
    for name in ("positions.csv", "group_means.csv", "density.csv"):
        values = np.loadtxt(root / "fit" / name, delimiter=",", skiprows=1, dtype=str)
        numeric = np.char.replace(values, "v", "").astype(float)
        assert np.isfinite(numeric).all()
