"""Command-line front end.

    lol run <config.json> [--set path=value]...
    lol compare <dir> <dir>... [--threshold X] [--out DIR]
    lol sweep <config.json> --axis <field> --values a,b,c [--set path=value]...
    lol report <path>... [--out DIR]

Exit codes: 0 on success, 2 for invalid configuration or arguments, 3 when a
run aborted on a non-finite loss (partial traces are preserved).
"""

from __future__ import annotations

import argparse
import json
import sys

from .runner import (
    ConfigError,
    DEFAULT_THRESHOLD,
    compare_runs,
    load_config_file,
    run_experiment,
    run_sweep,
)


def _parse_values(raw: str) -> list:
    values = []
    for chunk in raw.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            values.append(json.loads(chunk))
        except json.JSONDecodeError:
            values.append(chunk)
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lol",
        description="Learning-order simulator for large vs. small learning rates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run every seed x algorithm of a config")
    p_run.add_argument("config", help="experiment config JSON file")
    p_run.add_argument(
        "--set", dest="overrides", action="append", default=[],
        metavar="PATH=VALUE", help="dotted-path config override",
    )

    p_cmp = sub.add_parser("compare", help="tabulate algorithm runs side by side")
    p_cmp.add_argument("dirs", nargs="+", help="algorithm run directories")
    p_cmp.add_argument(
        "--threshold", type=float, default=DEFAULT_THRESHOLD,
        help="subset-loss level counting as 'learned' (default %(default)s)",
    )
    p_cmp.add_argument("--out", default=".", help="where to write comparison files")

    p_swp = sub.add_parser("sweep", help="run the cross product over one axis")
    p_swp.add_argument("config", help="experiment config JSON file")
    p_swp.add_argument("--axis", required=True, help="dotted config field")
    p_swp.add_argument(
        "--values", required=True, help="comma-separated axis values"
    )
    p_swp.add_argument(
        "--set", dest="overrides", action="append", default=[],
        metavar="PATH=VALUE", help="dotted-path config override",
    )

    p_rep = sub.add_parser(
        "report", help="render figures from traces / comparisons"
    )
    p_rep.add_argument("paths", nargs="+", help="run dirs, algo dirs or roots")
    p_rep.add_argument("--out", default=None, help="figure output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = load_config_file(args.config, args.overrides)
            return run_experiment(config)
        if args.command == "compare":
            return compare_runs(args.dirs, out_dir=args.out, threshold=args.threshold)
        if args.command == "sweep":
            config = load_config_file(args.config, args.overrides)
            return run_sweep(config, args.axis, _parse_values(args.values))
        if args.command == "report":
            from .report import render_report

            return render_report(args.paths, out_dir=args.out)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
