"""Command-line entry point: ``dmllab run|surface|scaling|dgp export|aggregate``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .core import RngStream
from .dgp import DgpSpec, export_generated, generate
from .errors import DmlLabError
from .metrics import SCOPES, write_aggregate_csv
from .runner import (ExperimentConfig, aggregate_rows, read_results, run_experiment,
                     run_lambda_surface, run_scaling_study, workers_from_env)


def _load(path: str) -> ExperimentConfig:
    return workers_from_env(ExperimentConfig.from_json(path))


def _out_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    out = Path(override or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args.config)
    summary = run_experiment(cfg, args.output_dir)
    print(f"{summary.cells} cells, {summary.failed} failed -> {summary.results_path}")
    return 0 if summary.ok else 1


def cmd_surface(args: argparse.Namespace) -> int:
    cfg = _load(args.config)
    path = _out_dir(cfg, args.output_dir) / "surface.csv"
    rows = run_lambda_surface(cfg, args.lambda_ell, args.lambda_m, path)
    print(f"{len(rows)} grid cells -> {path}")
    return 0


def cmd_scaling(args: argparse.Namespace) -> int:
    cfg = _load(args.config)
    path = _out_dir(cfg, args.output_dir) / "scaling.csv"
    rows = run_scaling_study(cfg, args.n, path)
    print(f"{len(rows)} rows -> {path}")
    return 0


def cmd_dgp_export(args: argparse.Namespace) -> int:
    if args.template is not None:
        spec = DgpSpec("acic", args.template, args.n, args.p, args.coeff_seed)
    else:
        spec = DgpSpec("bch", n=args.n or 100, p=args.p or 200, rho=args.rho, r2_y=args.r2_y,
                       r2_d=args.r2_d, theta0=args.theta0)
    gen = generate(spec, RngStream(args.seed))
    sidecar = export_generated(gen, args.out)
    print(f"{gen.data.n}x{gen.data.p} -> {args.out} (truth: {sidecar})")
    return 0


def cmd_aggregate(args: argparse.Namespace) -> int:
    rows = read_results(args.results)
    out = Path(args.out) if args.out else Path(args.results).with_name("aggregate.csv")
    records = aggregate_rows(rows, args.selection_scope)
    write_aggregate_csv(records, out)
    print(f"{len(records)} groups -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmllab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a Monte Carlo experiment")
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--output-dir", help="override the config's output_dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("surface", help="PLR lasso penalty surface on the bch design")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--lambda-ell", type=float, nargs="+", help="penalties for ell (default grid)")
    p.add_argument("--lambda-m", type=float, nargs="+", help="penalties for m (default grid)")
    p.set_defaults(func=cmd_surface)

    p = sub.add_parser("scaling", help="RMSE by sample size on the bch design")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--n", type=int, nargs="+", default=[100, 400, 1600])
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("dgp", help="synthetic data utilities")
    dsub = p.add_subparsers(dest="dgp_command", required=True)
    e = dsub.add_parser("export", help="write one dataset as CSV plus a truth JSON sidecar")
    e.add_argument("--template", type=int, help="ACIC template 1..16 (default: bch design)")
    e.add_argument("--n", type=int)
    e.add_argument("--p", type=int)
    e.add_argument("--seed", type=int, default=0, help="data seed")
    e.add_argument("--coeff-seed", type=int, default=0, help="template coefficient seed")
    e.add_argument("--rho", type=float, default=0.5)
    e.add_argument("--r2-y", type=float, default=0.5)
    e.add_argument("--r2-d", type=float, default=0.5)
    e.add_argument("--theta0", type=float, default=0.5)
    e.add_argument("--out", required=True, help="CSV path")
    e.set_defaults(func=cmd_dgp_export)

    p = sub.add_parser("aggregate", help="recompute aggregate metrics from a results CSV")
    p.add_argument("results")
    p.add_argument("--out")
    p.add_argument("--selection-scope", choices=SCOPES, default="per_repetition")
    p.set_defaults(func=cmd_aggregate)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args))
    except (DmlLabError, ValueError, OSError) as exc:
        print(f"dmllab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
