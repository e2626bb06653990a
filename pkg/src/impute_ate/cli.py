"""Command-line interface.

Subcommands: ``estimate``, ``simulate``, ``weights``, ``bound``,
``forest-diag``. Exit codes: 0 success, 2 configuration error, 3 data
error, 4 internal-consistency error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from typing import Optional

import numpy as np
from scipy.special import ndtri

from . import __version__
from .api import ImputationAte
from .config import ConfigError, RunConfig, build_adjuster, build_smoother, parse_config
from .data import DataError, Dataset
from .estimation import IDENTITY_TOL, AteEstimate, InternalConsistencyError
from .forest import Forest, ForestBuildError, ForestConfig, build_forest, leaf_diameter_profile
from .io import (
    dataset_fingerprint,
    read_csv_dataset,
    write_json,
    write_mc_rows_csv,
    write_weights_csv,
)
from .outcome import OutcomeFitError
from .simulation import DGPS, IntegrationError, SimulationError, efficiency_bound, run_mc
from .smoothers import SmootherError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4


def _load_config(path: str, command: str, seed_override: Optional[int]) -> RunConfig:
    try:
        with open(path) as fh:
            cfg = parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if cfg.command is not None and cfg.command != command:
        raise ConfigError(f"/command: config says {cfg.command!r}, invoked as {command!r}")
    if seed_override is not None:
        cfg = RunConfig(**{**cfg.__dict__, "seed": seed_override, "command": command})
    else:
        cfg = RunConfig(**{**cfg.__dict__, "command": command})
    return cfg


def _verify_report_identity(est: AteEstimate) -> None:
    c = est.components
    gap = abs(
        c.regression + c.treated_residual - c.control_residual + c.unnormalized_bias
        - est.tau_hat
    )
    if not gap <= IDENTITY_TOL:
        raise InternalConsistencyError(
            f"component identity off by {gap:.3e} at serialization time"
        )


def _estimate_report(cfg: RunConfig, ds: Dataset, est: AteEstimate, confidence: float, wall: float, data_path: str) -> dict:
    _verify_report_identity(est)
    report = {
        "estimate": est.to_dict(),
        "provenance": {
            "config": cfg.to_dict(),
            "data": {
                "path": data_path,
                "n": ds.n,
                "d": ds.d,
                "n_treated": ds.n_treated,
                "n_control": ds.n_control,
                "fingerprint": dataset_fingerprint(ds),
            },
            "version": __version__,
            "wall_time_s": wall,
        },
    }
    if confidence != 0.95:
        z = float(ndtri(0.5 + confidence / 2.0))
        half = z * est.standard_error
        report["estimate"]["ci"] = {
            "level": confidence,
            "lower": est.tau_hat - half,
            "upper": est.tau_hat + half,
        }
    return report


def _cmd_estimate(args) -> int:
    cfg = _load_config(args.config, "estimate", args.seed)
    ds = read_csv_dataset(args.data)
    start = time.perf_counter()
    runner = ImputationAte(
        smoother=build_smoother(cfg),
        adjuster=build_adjuster(cfg),
        crossfit=cfg.mode.folds if cfg.mode.type == "crossfit" else None,
        variance_mode=cfg.mode.variance,
        seed=cfg.seed,
    )
    est = runner.estimate(ds)
    wall = time.perf_counter() - start
    report = _estimate_report(cfg, ds, est, args.confidence, wall, args.data)
    write_json(report, args.out)
    print(f"tau_hat={est.tau_hat!r} se={est.standard_error!r} -> {args.out}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    cfg = _load_config(args.config, "simulate", args.seed)
    if cfg.dgp is None or cfg.dgp not in DGPS:
        raise ConfigError(f"/dgp: must be one of {sorted(DGPS)}")
    if cfg.n_grid is None or cfg.replications is None:
        raise ConfigError("/n_grid and /replications are required for simulate")
    dgp = DGPS[cfg.dgp]()
    runner = ImputationAte(
        smoother=build_smoother(cfg),
        adjuster=build_adjuster(cfg),
        crossfit=cfg.mode.folds if cfg.mode.type == "crossfit" else None,
        variance_mode=cfg.mode.variance,
        seed=cfg.seed,
    )
    start = time.perf_counter()
    reports = run_mc(dgp, runner, cfg.n_grid, cfg.replications, seed=cfg.seed)
    wall = time.perf_counter() - start
    payload = {
        "config": cfg.to_dict(),
        "dgp": {"name": dgp.name, "tau": dgp.tau, "sigma2_bound": dgp.sigma2_bound},
        "results": {str(n): reports[n].summary() for n in cfg.n_grid},
        "version": __version__,
        "wall_time_s": wall,
    }
    write_json(payload, args.out)
    if args.rows:
        write_mc_rows_csv(reports, args.rows)
    for n in cfg.n_grid:
        s = reports[n].summary()
        print(
            f"n={n}: bias={s['mean_bias']:+.5f} sd={s['sd']:.5f} "
            f"coverage={s['coverage']:.3f} ratio={s['efficiency_ratio']:.3f}"
        )
    return EXIT_OK


def _cmd_weights(args) -> int:
    cfg = _load_config(args.config, "weights", args.seed)
    ds = read_csv_dataset(args.data)
    sm = build_smoother(cfg).weights(ds)
    write_weights_csv(sm.entries(), args.out)
    summary_path = args.summary or (args.out + ".summary.json")
    write_json(
        {
            "config": cfg.to_dict(),
            "summary": sm.summary(),
            "row_sum": sm.row_sum.tolist(),
            "col_sum": sm.col_sum.tolist(),
            "fallback_flags": sm.fallback_flags.astype(int).tolist(),
        },
        summary_path,
    )
    print(f"weights -> {args.out}; summary -> {summary_path}")
    return EXIT_OK


def _cmd_bound(args) -> int:
    cfg = _load_config(args.config, "bound", args.seed)
    if cfg.dgp is None or cfg.dgp not in DGPS:
        raise ConfigError(f"/dgp: must be one of {sorted(DGPS)}")
    dgp = DGPS[cfg.dgp]()
    bound = efficiency_bound(dgp)
    payload = {"dgp": dgp.name, **bound.to_dict()}
    text = json.dumps(payload, indent=2)
    if args.out:
        write_json(payload, args.out)
    print(text)
    return EXIT_OK


def _cmd_forest_diag(args) -> int:
    cfg = _load_config(args.config, "forest-diag", args.seed)
    spec = cfg.forest_diag or {}
    n = int(spec.get("n", 512))
    dim = int(spec.get("dim", 1))
    s_grid = spec.get("s_grid", [64, 256])
    trees = int(spec.get("trees", 20))
    min_leaf = int(spec.get("min_leaf", 8))
    alpha = float(spec.get("alpha", 0.25))
    phi = float(spec.get("phi", 0.9))
    n_query = int(spec.get("n_query", 256))
    rng = np.random.default_rng(cfg.seed)
    x = rng.uniform(0.0, 1.0, (n + 1, dim))
    treatment = np.r_[np.ones(n, dtype=int), [0]]  # one placeholder control unit
    ds = Dataset(x, treatment, np.zeros(n + 1))
    queries = rng.uniform(0.0, 1.0, (n_query, dim))
    profiles = {}
    for s in s_grid:
        fc = ForestConfig(
            n_trees=trees,
            subsample_size=int(s),
            min_leaf=min_leaf,
            split_balance=alpha,
            axis_balance=phi,
            seed=cfg.seed,
        )
        forest = build_forest(ds, 1, fc)
        prof = leaf_diameter_profile(forest, queries, ds)
        profiles[f"s={s},theta={min_leaf},B={trees}"] = prof.to_dict()
    payload = {"config": cfg.to_dict(), "n": n, "dim": dim, "profiles": profiles}
    text = json.dumps(payload, indent=2)
    if args.out:
        write_json(payload, args.out)
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="impute-ate",
        description="Average treatment effect estimation by regression-adjusted imputation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_est = sub.add_parser("estimate", help="estimate the ATE from a CSV dataset")
    p_est.add_argument("--data", required=True)
    p_est.add_argument("--config", required=True)
    p_est.add_argument("--out", required=True)
    p_est.add_argument("--seed", type=int, default=None)
    p_est.add_argument("--confidence", type=float, default=0.95)
    p_est.set_defaults(func=_cmd_estimate)

    p_sim = sub.add_parser("simulate", help="run a seeded Monte Carlo study")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--rows", default=None, help="per-replication CSV")
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.set_defaults(func=_cmd_simulate)

    p_w = sub.add_parser("weights", help="dump the smoothing matrix")
    p_w.add_argument("--data", required=True)
    p_w.add_argument("--config", required=True)
    p_w.add_argument("--out", required=True)
    p_w.add_argument("--summary", default=None)
    p_w.add_argument("--seed", type=int, default=None)
    p_w.set_defaults(func=_cmd_weights)

    p_b = sub.add_parser("bound", help="efficiency bound of a known generator")
    p_b.add_argument("--config", required=True)
    p_b.add_argument("--out", default=None)
    p_b.add_argument("--seed", type=int, default=None)
    p_b.set_defaults(func=_cmd_bound)

    p_f = sub.add_parser("forest-diag", help="leaf diameter diagnostics")
    p_f.add_argument("--config", required=True)
    p_f.add_argument("--out", default=None)
    p_f.add_argument("--seed", type=int, default=None)
    p_f.set_defaults(func=_cmd_forest_diag)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        DataError,
        SmootherError,
        OutcomeFitError,
        ForestBuildError,
        SimulationError,
        IntegrationError,
        OSError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InternalConsistencyError as exc:
        print(f"internal consistency error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
