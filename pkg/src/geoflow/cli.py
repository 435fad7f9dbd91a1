"""Command-line interface: gen | run | transfer | report.

Exit codes: 0 success, 1 stage failure, 2 usage/configuration error.
GEOFLOW_THREADS caps worker parallelism for stages that support it.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import STAGES, load_config
from .errors import ConfigError, GeoflowError
from .pipeline import Pipeline
from .tableio import read_csv


def _add_common(parser):
    parser.add_argument("--config", help="YAML config file (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geoflow",
        description="Calibrated synthetic zone-flow panels with local regression, "
        "forest/graph learners, hybrid ensembling, and spatial diagnostics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate the calibrated panel bundle")
    _add_common(gen)

    run = sub.add_parser("run", help="run pipeline stages")
    _add_common(run)
    run.add_argument(
        "--stage",
        default="all",
        choices=list(STAGES) + ["all"],
        help="run every stage up to and including this one",
    )

    transfer = sub.add_parser("transfer", help="run the cross-city transfer experiment")
    _add_common(transfer)

    report = sub.add_parser("report", help="print the model-comparison summary of a run")
    report.add_argument("--out", required=True, help="existing run directory")
    report.add_argument("--verbose", action="store_true")
    return parser


def _pipeline(args) -> Pipeline:
    overrides = {"seed": args.seed} if args.seed is not None else None
    config = load_config(args.config, overrides)
    return Pipeline(config, args.out)


def _run_stages(args, stages) -> int:
    try:
        pipeline = _pipeline(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        pipeline.run(stages)
    except GeoflowError as exc:
        stage = next(
            (s for s in ("gen", "features", "mgwr", "train", "evaluate", "insights", "transfer")
             if s not in pipeline.stage_files),
            "unknown",
        )
        print(f"stage {stage} failed: {exc}", file=sys.stderr)
        return 1
    if args.verbose:
        for stage, secs in pipeline.wall_clock.items():
            print(f"{stage}: {secs:.1f}s")
        for warning in pipeline.warnings:
            print(f"warning: {warning}")
    print(f"run complete: {pipeline.out / 'manifest.json'}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    table5 = out / "table5_performance.csv"
    if not table5.exists():
        print(f"no evaluation outputs under {out}", file=sys.stderr)
        return 2
    _, header, rows = read_csv(table5)
    widths = [max(len(h), 12) for h in header]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        print("  ".join(str(c)[: w].ljust(w) for c, w in zip(row, widths)))
    metrics = out / "evaluate/metrics.json"
    if metrics.exists():
        with open(metrics) as fh:
            payload = json.load(fh)
        alphas = {m: payload[m].get("alpha") for m in payload}
        print(f"mixing weights: {alphas}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if args.command == "gen":
        return _run_stages(args, "gen")
    if args.command == "run":
        return _run_stages(args, args.stage)
    if args.command == "transfer":
        return _run_stages(args, "transfer")
    if args.command == "report":
        return cmd_report(args)
    return 2


if __name__ == "__main__":
    sys.exit(main())
