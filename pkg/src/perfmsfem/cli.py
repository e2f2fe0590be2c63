"""Command line entry point: ``perfmsfem {bases,run,homog,rates}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="experiment config file (key = value)")
    p.add_argument("--workers", type=int, default=None, help="worker processes for element jobs")
    p.add_argument("--paper-scale", action="store_true", help="use the .paper grids of the config")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, default=None, help="seed for randomly thinned perforations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perfmsfem", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("bases", "precompute and cache element basis functions"),
                       ("run", "run a method sweep and write report files"),
                       ("homog", "effective coefficients from periodic cell problems"),
                       ("rates", "homogenization rate study over eps")):
        _common(sub.add_parser(name, help=text))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = harness.load_config(args.config, args.paper_scale)
        cfg = harness.with_overrides(cfg, out=args.out, seed=args.seed)
    except (OSError, harness.ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    workers = harness.worker_count(args.workers, cfg)

    if args.command == "bases":
        summary = harness.precompute_bases(cfg, workers)
        times = summary.pop("element_times")
        summary["mean_element_s"] = sum(times) / len(times) if times else 0.0
        summary["max_element_s"] = max(times, default=0.0)
        print(json.dumps(summary, indent=2, default=str))
        return 0 if not summary["failed"] else 1

    if args.command == "run":
        report = harness.run_experiment(cfg, workers)
        paths = harness.write_report(report, out)
        bad = sum(r["status"] != "ok" for r in report.rows)
        print(f"{len(report.rows)} rows, {bad} failed -> {paths['report']}")
        return 0 if report.ok else 1

    if args.command == "homog":
        rows = harness.run_homog(cfg)
        path = harness.write_tsv(rows, harness.HOMOG_COLUMNS, out / "homog.tsv")
    else:
        rows = harness.run_rates(cfg)
        path = harness.write_tsv(rows, harness.RATE_COLUMNS, out / "rates.tsv")
    bad = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} rows, {bad} failed -> {path}")
    return 0 if bad == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
