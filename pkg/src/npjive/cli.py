"""Command line interface: ``npjive {simulate,estimate,oracle,figure,selfcheck}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 selfcheck failure.  Errors go to standard error as one-line JSON.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .basis import make_basis
from .estimators import ESTIMATORS, LambdaPolicy, NoEstimableCells, EstimateReport, estimate_all
from .grouped import GroupedDataError, assign_folds, load_csv
from .montecarlo import StudyConfig, StudyFailed, run_study, run_sweep, summary_csv, write_outputs
from .oracle import OracleError, OracleModel, gap, identity_checks, solve
from .solver import FunctionalSpec, SingularSystem

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_SELFCHECK = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None


def _study(args) -> StudyConfig:
    cfg = StudyConfig.from_dict(_load_json(args.config))
    over = {}
    if args.seed is not None:
        over["base_seed"] = args.seed
    if args.workers is not None:
        over["workers"] = args.workers
    if getattr(args, "reps", None) is not None:
        over["reps"] = args.reps
    return StudyConfig.from_dict({**cfg.to_dict(), **over}) if over else cfg


def _emit(text, out: Path | None, name: str):
    if out is None:
        sys.stdout.write(text)
    else:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)


def cmd_simulate(args) -> int:
    cfg = _study(args)
    Ks = cfg.dgp.get("K")
    if isinstance(Ks, list):
        results = run_sweep(cfg, Ks, [cfg.dgp.get("n", 30)], cfg.workers)
    else:
        results = [run_study(cfg)]
    if args.out is not None:
        write_outputs(results, args.out, args.format, charts=args.svg)
        return EXIT_OK
    rows = [r for res in results for r in res.summary]
    if args.format == "csv":
        sys.stdout.write(summary_csv(rows))
    else:
        sys.stdout.write(json.dumps({"config": cfg.to_dict(), "summary": rows}, default=_nan) + "\n")
    return EXIT_OK


def cmd_figure(args) -> int:
    cfg = _study(args)
    results = run_sweep(cfg, args.K, args.n, cfg.workers)
    out = args.out or Path("figure")
    write_outputs(results, out, args.format, charts=True)
    return EXIT_OK


def _nan(v):
    return None


def cmd_estimate(args) -> int:
    conf = _load_json(args.config) if args.config else {}
    try:
        sample = load_csv(args.data)
    except FileNotFoundError:
        raise ConfigError(f"file not found: {args.data}") from None
    target = np.loadtxt(args.target, delimiter=",", skiprows=1, ndmin=2)
    seed = args.seed if args.seed is not None else int(conf.get("seed", 0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sample = assign_folds(sample, seed, conf.get("scheme", "two_fold"))
        bconf = conf.get("basis", {"kind": "histogram", "size": 16})
        basis = make_basis(bconf.get("kind", "histogram"), int(bconf.get("size", 16)), sample)
    spec = FunctionalSpec.from_target(basis, target)
    names = conf.get("estimators", ["crossfold", "single_split", "plugin"])
    bad = [e for e in names if e not in ESTIMATORS]
    if bad:
        raise ConfigError(f"unknown estimators: {bad}")
    reports = estimate_all(sample, basis, spec, names, LambdaPolicy.from_dict(conf.get("lambda")), seed,
                           float(conf.get("level", 0.95)), crossfit=bool(conf.get("crossfit", False)))
    if args.format == "csv":
        text = EstimateReport.csv_header() + "\n" + "".join(r.to_csv_row() + "\n" for r in reports.values())
    else:
        text = json.dumps([r.to_dict() for r in reports.values()], indent=1) + "\n"
    _emit(text, args.out, f"estimates.{args.format}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    data = _load_json(args.model)
    model = OracleModel.from_dict(data)
    sol = solve(model)
    h_star = data.get("h_star")
    out = sol.to_dict()
    if h_star is not None:
        g = gap(model, h_star)
        out["gap"] = g["gap"]
        out["psi_h_star"] = g["psi"]
    out["identity_checks"] = identity_checks(model, h_star)
    _emit(json.dumps(out, indent=1) + "\n", args.out, "oracle.json")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    res = run_selfcheck(args.seed or 0)
    for k, v in res.items():
        print(f"{'PASS' if v else 'FAIL'} {k}")
    return EXIT_OK if all(res.values()) else EXIT_SELFCHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npjive", description="Jackknife IV estimation of linear functionals")
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--workers", type=int, default=None)
    common.add_argument("--out", type=Path, default=None)
    common.add_argument("--format", choices=("csv", "json"), default=None)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run a replication study")
    s.add_argument("config")
    s.add_argument("--reps", type=int, default=None)
    s.add_argument("--svg", action="store_true", help="also write metric-vs-K charts (needs --out)")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", parents=[common], help="estimate on a data CSV")
    e.add_argument("data")
    e.add_argument("target", help="CSV of target treatments (header, columns x1..xd)")
    e.add_argument("--config", default=None)
    # parent actions are shared objects, so per-command format defaults are resolved in main()
    e.set_defaults(func=cmd_estimate, default_format="json")

    o = sub.add_parser("oracle", parents=[common], help="solve a discrete model exactly")
    o.add_argument("model")
    o.set_defaults(func=cmd_oracle)

    f = sub.add_parser("figure", parents=[common], help="sweep K x n and chart the metrics")
    f.add_argument("config")
    f.add_argument("--K", type=int, nargs="+", required=True)
    f.add_argument("--n", type=int, nargs="+", required=True)
    f.add_argument("--reps", type=int, default=None)
    f.set_defaults(func=cmd_figure)

    c = sub.add_parser("selfcheck", parents=[common], help="run the invariant suite")
    c.set_defaults(func=cmd_selfcheck)
    return p


def _fail(exc, code) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.format is None:
        args.format = getattr(args, "default_format", "csv")
    try:
        return args.func(args)
    except (SingularSystem, np.linalg.LinAlgError, NoEstimableCells, StudyFailed, FloatingPointError) as exc:
        return _fail(exc, EXIT_NUMERIC)
    except (ConfigError, GroupedDataError, OracleError, ValueError, KeyError, TypeError, OSError) as exc:
        return _fail(exc, EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
