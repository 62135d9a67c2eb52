"""plot_convergence <csv...> --out fig.png [--p 2] [--title ...]"""

from __future__ import annotations

import argparse
import sys

from .render import FigureSpec, SchemaError, render_convergence


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot_convergence",
        description="Render a log-log convergence figure (with fitted slopes) from converge CSVs.",
    )
    parser.add_argument("csv", nargs="+", help="converge CSV file(s); one panel per file")
    parser.add_argument("--out", required=True, help="output image path (sidecar .txt written next to it)")
    parser.add_argument("--p", type=float, default=None, help="only plot rows with this p value")
    parser.add_argument("--title", default=None, help="figure title")
    args = parser.parse_args(argv)

    spec = FigureSpec(csv_paths=args.csv, out_path=args.out, p_filter=args.p, title=args.title)
    try:
        summaries = render_convergence(spec)
    except (SchemaError, ValueError, OSError) as exc:
        print(f"plot_convergence: {exc}", file=sys.stderr)
        return 1
    for s in summaries:
        print(f"{s.source}: p={s.p:g} slope={s.slope:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
