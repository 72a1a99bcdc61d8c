"""Command-line entry point: ``clsna {simulate,fit,variance,scan,diagnose}``.

Every subcommand writes its artifacts to ``--out``.  On failure it writes
``error.json`` there instead and exits with 2 (bad input), 3 (numerical
failure) or 4 (non-convergence).
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig, load_config
from .errors import CLSNAError, ConvergenceError, InputError
from .model import PARAM_NAMES, GlobalParams
from .optimizer import fit_map_staged
from .selection import changepoint_scan
from .simulate import Churn, ScenarioSpec, flocking_spec, polarization_spec, simulate
from .uncertainty import (build_report, diagnostic_linearity, diagnostic_normality,
                          parse_combination)

logger = logging.getLogger("clsna")

DESIGNS = {"flocking": flocking_spec, "polarization": polarization_spec}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, data: bool = True):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--seed", type=int, help="overrides the configured seed")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded linear algebra and no timing fields, for byte-identical artifacts")
    p.add_argument("-v", "--verbose", action="store_true")
    if data:
        p.add_argument("--edges", required=True, help="edge list CSV (time,node_a,node_b)")
        p.add_argument("--nodes", required=True, help="node CSV (intervals or per-time presence)")
        p.add_argument("--times", help="optional time-label CSV (time,label)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clsna", description="Coevolving latent space network models with attractors")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("simulate", help="draw a synthetic network series")
    _common(p, data=False)
    p = sub.add_parser("fit", help="staged MAP fit")
    _common(p)
    p.add_argument("--allow-unconverged", action="store_true",
                   help="exit 0 even if the optimizer hit max_iters")
    for name, text in (("variance", "anchored posterior variances"),
                       ("scan", "change-point scan ranked by BIC"),
                       ("diagnose", "normality and linearity diagnostics")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--fit", help="directory written by 'clsna fit' (refits when omitted)")
        p.add_argument("--allow-unconverged", action="store_true")
    return parser


# --- subcommands -----------------------------------------------------------------------

def _series(args):
    series, info = io.load_series(args.edges, args.nodes, args.times)
    if info.duplicate_edges:
        logger.warning("dropped %d duplicate edge rows", info.duplicate_edges)
    return series, info.time_labels


def _check_converged(fit, args, what="fit"):
    if not fit.converged and not args.allow_unconverged:
        raise ConvergenceError(f"{what} did not converge within {fit.iterations} iterations")


def _fit(series, cfg: RunConfig):
    return fit_map_staged(series, cfg.latent.p_target, cfg.latent.q_over, cfg.optimizer_config(),
                          hyper=cfg.hyper.build(), delta_rule=cfg.latent.delta_rule)


def _mode_fit(args, series, cfg, out: Path):
    if args.fit:
        fit = io.load_fit(args.fit, series)
    else:
        fit = _fit(series, cfg)
        io.save_fit(fit, out / "fit")
    _check_converged(fit, args, "mode fit")
    return fit


def cmd_simulate(args, cfg: RunConfig, out: Path) -> dict:
    sim = cfg.simulation
    if sim.design not in DESIGNS:
        raise InputError(f"unknown design {sim.design!r}; expected one of {sorted(DESIGNS)}")
    base = DESIGNS[sim.design](n=sim.n, seed=cfg.seed, T=sim.T)
    params = GlobalParams(**{**base.params.to_dict(), **sim.params})
    after = None
    if sim.changepoint is not None:
        after = GlobalParams(**{**params.to_dict(), **sim.params_after})
    churn = Churn(**sim.churn) if sim.churn is not None else None
    spec = ScenarioSpec(n=sim.n, T=sim.T, params=params, p=sim.p, hyper=cfg.hyper.build(),
                        group_split=sim.group_split, churn=churn, seed=cfg.seed,
                        changepoint=sim.changepoint, params_after=after)
    series, truth = simulate(spec)
    io.write_series(series, out)
    pres = truth.presence
    coords = tuple(f"z{k + 1}" for k in range(truth.dim))
    io.write_csv(out / "truth_positions.csv", ("time", "node", "group") + coords,
                 ((t + 1, series.node_ids[i], series.labels[i], *truth.positions[t, i])
                  for t in range(series.T) for i in np.flatnonzero(pres[t])))
    doc = {"schema": f"clsna.truth/{io.SCHEMA_VERSION}", "params": params.to_dict(),
           "changepoint": sim.changepoint, "params_after": after.to_dict() if after else None,
           "n": sim.n, "T": sim.T, "seed": cfg.seed}
    io.write_json(out / "truth.json", doc)
    return {"nodes": series.n_nodes, "T": series.T}


def cmd_fit(args, cfg: RunConfig, out: Path) -> dict:
    series, labels = _series(args)
    fit = _fit(series, cfg)
    io.save_fit(fit, out)
    io.export_trajectory_summaries(fit, series, out, labels)
    io.write_trace(fit.trace, out / "trace.csv")
    _check_converged(fit, args)
    return {"log_posterior": fit.final_log_posterior, "converged": fit.converged}


def cmd_variance(args, cfg: RunConfig, out: Path) -> dict:
    series, labels = _series(args)
    fit = _mode_fit(args, series, cfg, out)
    vc = cfg.variance
    combos = {label: parse_combination(text) for label, text in vc.combos.items()}
    report = build_report(series, fit, vc.targets, combos, vc.eta, cfg.optimizer_config(),
                          polish=vc.polish, keep_latent=vc.latent_rows, solver=vc.solver)
    io.write_json(out / "uncertainty.json", report.to_dict())
    for target, cov in report.latent_covariance.items():
        coords = tuple(f"z{k + 1}" for k in range(cov.shape[2]))
        pres = series.presence
        io.write_csv(out / f"latent_covariance_{target}.csv", ("time", "node") + coords,
                     ((labels[t], series.node_ids[i], *cov[t, i])
                      for t in range(series.T) for i in np.flatnonzero(pres[t])))
    return {"variances": report.variances}


def cmd_scan(args, cfg: RunConfig, out: Path) -> dict:
    series, _ = _series(args)
    fit = _mode_fit(args, series, cfg, out)
    sc = cfg.selection
    result = changepoint_scan(series, sc.candidates or None, cfg.optimizer_config(), sc.split,
                              base_fit=fit, hyper=cfg.hyper.build(), likelihood=sc.likelihood)
    io.write_table(out / "scan.csv", result.table())
    io.write_json(out / "scan.json", {"schema": f"clsna.scan/{io.SCHEMA_VERSION}",
                                      "argmin": result.argmin, "table": result.table(),
                                      "likelihood": sc.likelihood})
    return {"argmin": result.argmin}


def cmd_diagnose(args, cfg: RunConfig, out: Path) -> dict:
    series, _ = _series(args)
    fit = _mode_fit(args, series, cfg, out)
    vc = cfg.variance
    opt = cfg.optimizer_config()
    normal = diagnostic_normality(series, fit, vc.diagnose_target, vc.eta_grid, opt, vc.polish,
                                  vc.solver)
    io.write_table(out / "normality.csv", normal.rows())
    linear = diagnostic_linearity(series, fit, vc.diagnose_target, vc.eta_grid, opt, vc.polish,
                                  vc.solver)
    summary = linear.summary()
    io.write_csv(out / "linearity.csv", ("rank", "min_slope", "mean_slope", "max_slope"),
                 ((k, *row) for k, row in enumerate(summary)))
    central = linear.central()
    spread = linear.spread()
    io.write_json(out / "diagnostics.json", {
        "schema": f"clsna.diagnostics/{io.SCHEMA_VERSION}", "target": vc.diagnose_target,
        "eta_grid": list(vc.eta_grid), "normality_r_squared": normal.r_squared,
        "implied_variance": normal.implied_variance,
        "linearity_central_coordinates": len(central),
        "linearity_median_spread": float(np.median(spread[np.isfinite(spread)]))
        if np.isfinite(spread).any() else None,
    })
    return {"r_squared": normal.r_squared}


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "variance": cmd_variance,
            "scan": cmd_scan, "diagnose": cmd_diagnose}


def _limits(deterministic: bool):
    if not deterministic:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out = _out_from_argv(argv)
    command = argv[0] if argv else None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        overrides = {"seed": args.seed} if args.seed is not None else None
        cfg = load_config(args.config, overrides=overrides)
        out = Path(args.out or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        with _limits(args.deterministic):
            summary = COMMANDS[command](args, cfg, out)
        manifest = {"schema": f"clsna.run/{io.SCHEMA_VERSION}", "command": command,
                    "config": cfg.to_dict(), "summary": summary,
                    "parameters": list(PARAM_NAMES), "deterministic": args.deterministic}
        if not args.deterministic:
            manifest["elapsed_seconds"] = time.perf_counter() - start
        io.write_json(out / "run.json", manifest)
        return 0
    except CLSNAError as exc:
        return _fail(out, command, exc, exc.exit_code)
    except OSError as exc:
        return _fail(out, command, exc, InputError.exit_code)


def _out_from_argv(argv) -> Path:
    """Best-effort ``--out`` lookup so that argument errors still land in the output directory."""
    for k, arg in enumerate(argv):
        if arg == "--out" and k + 1 < len(argv):
            return Path(argv[k + 1])
        if arg.startswith("--out="):
            return Path(arg.split("=", 1)[1])
    return Path(".")


def _fail(out: Path, command, exc: Exception, code: int) -> int:
    doc = {"schema": f"clsna.error/{io.SCHEMA_VERSION}", "command": command,
           "error": type(exc).__name__, "message": str(exc), "exit_code": code}
    try:
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(out / "error.json", doc)
    except (OSError, CLSNAError):
        pass
    print(f"error: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
