"""Command line entry points for the plot scripts.

Exit codes: 0 success, 1 runtime failure, 2 bad input (missing columns,
malformed arguments).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .plots import PlotSpec, make_boxplot, make_sigma_line
from .results import ContractError, make_tables


def cmd_boxplot(args) -> int:
    spec = PlotSpec(csv_paths=args.csv, out_path=args.out,
                    reference=args.reference, title=args.title or "")
    if args.methods:
        spec.method_order = tuple(args.methods.split(","))
    res = make_boxplot(spec)
    print(f"boxplot with {len(res.labels)} boxes -> {res.out_path}")
    return 0


def cmd_tables(args) -> int:
    written = make_tables(args.csv, args.out)
    for name, path in written.items():
        print(f"{name} -> {path}")
    return 0


def cmd_sigma_line(args) -> int:
    series = []
    for pair in args.pair:
        try:
            value, path = pair.split("=", 1)
            series.append((float(value), path))
        except ValueError:
            raise ContractError(f"bad --pair {pair!r}; expected VALUE=CSV")
    out = make_sigma_line(series, args.out, xlabel=args.xlabel)
    print(f"sigma line -> {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="twistplots",
        description="Figures and tables from twistpf result CSVs")
    sub = parser.add_subparsers(dest="command", required=True)

    p_box = sub.add_parser("boxplot", help="per-method boxplot of log Z-hat")
    p_box.add_argument("--csv", nargs="+", required=True)
    p_box.add_argument("--out", required=True)
    p_box.add_argument("--reference", type=float)
    p_box.add_argument("--methods", help="comma list fixing the box order")
    p_box.add_argument("--title")
    p_box.set_defaults(func=cmd_boxplot)

    p_tab = sub.add_parser("tables", help="sigma and ESS summary tables")
    p_tab.add_argument("--csv", nargs="+", required=True)
    p_tab.add_argument("--out", required=True, help="output directory")
    p_tab.set_defaults(func=cmd_tables)

    p_line = sub.add_parser("sigma-line", help="sigma vs swept parameter")
    p_line.add_argument("--pair", nargs="+", required=True,
                        metavar="VALUE=CSV")
    p_line.add_argument("--out", required=True)
    p_line.add_argument("--xlabel", default="alpha")
    p_line.set_defaults(func=cmd_sigma_line)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
