"""Command line front end: ``spire simulate | fit | test``.

Exit codes: 0 success, 2 configuration or data error, 3 flagged
non-convergence, 4 unwritable output path.  Flags may also be supplied
through ``--config file.json``; explicit flags win, unknown keys are
rejected.  Every JSON output embeds the fully resolved configuration and
seed so a run can be reproduced exactly.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict

import numpy as np

from .errors import SpireError, TestFitError
from .estimators import EstimatorKind, fit
from .inference import TEST_BASES, _test_against_mle
from .io import read_dataset_csv, scale_to_unit, write_json
from .numerics import gauss_hermite
from .simulation import (SimulationConfig, make_ipw_weight, make_working_model,
                         model_for, parse_estimators, run_monte_carlo,
                         run_power_study)
from .working import make_grid

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGED = 3
EXIT_UNWRITABLE = 4

_Z975 = 1.959963984540054


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spire",
        description="Regression with an informatively right-censored covariate",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of flag defaults")
        p.add_argument("--design", choices=["controlled", "realistic", "power"])
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--grid-m", type=int, dest="grid_m")
        p.add_argument("--quad-nodes", type=int, dest="quad_nodes")
        p.add_argument("--bandwidth", type=float)
        p.add_argument("--tol", type=float)
        p.add_argument("--max-iter", type=int, dest="max_iter")
        p.add_argument("--out", help="output directory (default .)")

    sim = sub.add_parser("simulate", help="Monte Carlo study of the estimators")
    common(sim)
    sim.add_argument("--mu", type=float)
    sim.add_argument("--alpha", type=float)
    sim.add_argument("--sigma", type=float)
    sim.add_argument("--n", type=int)
    sim.add_argument("--N", type=int, dest="n_replicates")
    sim.add_argument("--estimators",
                     help="comma list like spire:true,mle:unif (mis = unif)")

    fitp = sub.add_parser("fit", help="fit one estimator to a CSV dataset")
    common(fitp)
    fitp.add_argument("--data", help="CSV with header y,w,delta,z1..zd")
    fitp.add_argument("--estimator", choices=["cc", "ipw", "mle", "spire"])
    fitp.add_argument("--working", choices=["true", "unif", "km", "mis"])
    fitp.add_argument("--mu", type=float)
    fitp.add_argument("--alpha", type=float)
    fitp.add_argument("--sigma", type=float)
    fitp.add_argument("--scale-to-unit", nargs="?", const="", default=None,
                      dest="scale_to_unit",
                      help="min-max scale w (and listed z columns, e.g. '2,3') to (0,1)")

    testp = sub.add_parser("test", help="chi-square test for noninformative censoring")
    common(testp)
    testp.add_argument("--data", help="CSV with header y,w,delta,z1..zd")
    testp.add_argument("--bases", help="comma list from cc,ipw,spire (default all)")
    testp.add_argument("--include-sigma2", action="store_true", default=None,
                       dest="include_sigma2")
    testp.add_argument("--scale-to-unit", nargs="?", const="", default=None,
                       dest="scale_to_unit")
    return parser


_DEFAULTS = {
    "design": "controlled",
    "seed": 0,
    "threads": 1,
    "grid_m": 50,
    "quad_nodes": 40,
    "bandwidth": 0.05,
    "tol": 1e-8,
    "max_iter": 100,
    "out": ".",
    "mu": None,
    "alpha": 0.0,
    "sigma": 2.0,
    "n": 1000,
    "n_replicates": 100,
    "estimators": "spire:km",
    "data": None,
    "estimator": "spire",
    "working": "km",
    "scale_to_unit": None,
    "bases": "spire,cc,ipw",
    "include_sigma2": False,
}


class CliError(Exception):
    pass


def _resolve(args: argparse.Namespace) -> dict:
    """Merge CLI flags over config-file values over defaults."""
    merged = dict(_DEFAULTS)
    known = set(merged) | {"command", "config"}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config file: {exc}")
        if not isinstance(file_cfg, dict):
            raise CliError("config file must hold a JSON object")
        for key, val in file_cfg.items():
            key = key.replace("-", "_")
            if key not in known:
                raise CliError(f"unknown config key {key!r}")
            merged[key] = val
    for key, val in vars(args).items():
        if key in ("command", "config"):
            continue
        if val is not None:
            merged[key] = val
    merged["command"] = args.command
    return merged


def _default_mu(cfg: dict) -> float:
    if cfg["mu"] is not None:
        return float(cfg["mu"])
    # power runs calibrate mu to hold 80 percent censoring
    return float("nan") if cfg["design"] == "power" else 0.0


def _out_path(cfg: dict, name: str) -> str:
    out_dir = cfg["out"] or "."
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}")
    return os.path.join(out_dir, name)


def _sim_config(cfg: dict, estimators) -> SimulationConfig:
    return SimulationConfig(
        design=cfg["design"], n=int(cfg["n"]),
        n_replicates=int(cfg["n_replicates"]), seed=int(cfg["seed"]),
        mu=_default_mu(cfg), alpha=float(cfg["alpha"]), sigma=float(cfg["sigma"]),
        estimators=estimators, m=int(cfg["grid_m"]), n_q=int(cfg["quad_nodes"]),
        bandwidth=float(cfg["bandwidth"]), tol=float(cfg["tol"]),
        max_iter=int(cfg["max_iter"]), threads=int(cfg["threads"]),
    )


def _config_record(cfg: dict) -> dict:
    rec = {k: v for k, v in cfg.items() if v is not None}
    return rec


def cmd_simulate(cfg: dict) -> int:
    estimators = parse_estimators(cfg["estimators"])
    config = _sim_config(cfg, estimators)
    if config.design == "power":
        rows = run_power_study(config)
        lines = ["design,estimator,working,param,mean,ese,ase,cov,nonconverged"]
        payload = []
        for r in rows:
            se = math.sqrt(max(r.power * (1 - r.power), 0.0) / max(r.n_tests, 1))
            label = f"power(alpha={r.alpha:g})"
            lines.append(",".join([
                r.design, r.base, "km", label, repr(r.power), repr(se), "", "",
                str(r.failures)]))
            payload.append({"design": r.design, "base": r.base, "alpha": r.alpha,
                            "power": r.power, "rejections": r.rejections,
                            "n_tests": r.n_tests, "failures": r.failures})
        csv_text = "\n".join(lines) + "\n"
        flagged = any(r.failures > 0.2 * max(r.n_tests + r.failures, 1) for r in rows)
        summary = {"rows": payload}
    else:
        table = run_monte_carlo(config)
        csv_text = table.to_csv_text()
        flagged = table.flagged()
        summary = {
            "rows": [asdict(r) for r in table.rows],
            "censoring_mean": table.censoring_mean,
        }
    summary["config"] = {**_config_record(cfg), "resolved": asdict(config)}
    with open(_out_path(cfg, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    write_json(summary, _out_path(cfg, "summary.json"))
    return EXIT_NONCONVERGED if flagged else EXIT_OK


def _load_data(cfg: dict):
    if not cfg["data"]:
        raise CliError("--data is required")
    dataset = read_dataset_csv(cfg["data"])
    transforms = {}
    if cfg["scale_to_unit"] is not None:
        cols = [c for c in str(cfg["scale_to_unit"]).split(",") if c.strip()]
        dataset, transforms = scale_to_unit(dataset, cols)
    return dataset, transforms


def cmd_fit(cfg: dict) -> int:
    dataset, transforms = _load_data(cfg)
    spec = model_for(cfg["design"])
    spec.check_dimension(dataset.d)
    working = "unif" if cfg["working"] == "mis" else cfg["working"]
    sim_cfg = _sim_config(cfg, (("spire", "km"),))
    name = cfg["estimator"]
    if name == "cc":
        kind = EstimatorKind.cc()
        working = "none"
    elif name == "ipw":
        kind = EstimatorKind.ipw(make_ipw_weight(sim_cfg, dataset, working))
    else:
        grid = make_grid(dataset, int(cfg["grid_m"]))
        wm = make_working_model(sim_cfg, dataset, grid, working)
        kind = EstimatorKind.mle(wm) if name == "mle" else EstimatorKind.spire(wm)
    result = fit(dataset, spec, kind, rule=gauss_hermite(int(cfg["quad_nodes"])),
                 tol=float(cfg["tol"]), max_iter=int(cfg["max_iter"]))
    beta = result.params.beta
    ase = result.ase[:spec.n_coef]
    payload = {
        "estimator": name,
        "working_model": working,
        "beta_hat": beta,
        "ase": ase,
        "ci95": np.stack([beta - _Z975 * ase, beta + _Z975 * ase], axis=1),
        "sigma2_hat": result.params.sigma2,
        "converged": result.converged,
        "iterations": result.report.iterations,
        "dropped_rows": result.dropped_rows,
        "config": {**_config_record(cfg), "transforms": transforms,
                   "final_score_norm": result.report.final_norm},
    }
    write_json(payload, _out_path(cfg, "fit.json"))
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def cmd_test(cfg: dict) -> int:
    dataset, transforms = _load_data(cfg)
    spec = model_for(cfg["design"])
    spec.check_dimension(dataset.d)
    bases = [b.strip() for b in cfg["bases"].split(",") if b.strip()]
    for b in bases:
        if b not in TEST_BASES:
            raise CliError(f"unknown test base {b!r}")
    code = EXIT_OK
    payload: dict = {"bases": {}}
    try:
        results = _test_against_mle(
            dataset, spec, bases, bandwidth=float(cfg["bandwidth"]),
            m=int(cfg["grid_m"]), rule=gauss_hermite(int(cfg["quad_nodes"])),
            include_sigma2=bool(cfg["include_sigma2"]),
            tol=float(cfg["tol"]), max_iter=int(cfg["max_iter"]))
    except TestFitError as exc:
        payload["error"] = str(exc)
        payload["reports"] = {
            k: {"iterations": r.iterations, "final_norm": r.final_norm,
                "converged": r.converged}
            for k, r in exc.reports.items()
        }
        code = EXIT_NONCONVERGED
        results = {}
    for base, res in results.items():
        payload["bases"][base] = {
            "statistic": res.statistic,
            "df": res.df,
            "p_value": res.p_value,
            "beta1": res.beta1,
            "beta2": res.beta2,
        }
    payload["config"] = {**_config_record(cfg), "transforms": transforms}
    write_json(payload, _out_path(cfg, "test.json"))
    return code


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        cfg = _resolve(args)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "fit":
            return cmd_fit(cfg)
        return cmd_test(cfg)
    except (CliError, SpireError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNWRITABLE


if __name__ == "__main__":
    sys.exit(main())
