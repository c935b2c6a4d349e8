"""Command line entry: one figure per invocation.

    mfgplot --input-dir out/run --figure loss-curve --out fig/loss.png
    mfgplot --input-dir out/run --figure control-overlay \
            --oracle-dir out/oracle --out fig/control.png

Overlay kinds take a reference directory; leaving it off compares the
run against itself, which should (and can be checked to) coincide.
Exit codes: 0 wrote the image, 1 bad inputs, 2 bad arguments.
"""

import argparse
import sys

from .figures import FIGURE_KINDS, FigureError, render, spec_for


def build_parser():
    p = argparse.ArgumentParser(
        prog="mfgplot",
        description="render a figure from a solver run directory")
    p.add_argument("--input-dir", required=True,
                   help="run directory holding the CSV artifacts")
    p.add_argument("--figure", required=True, choices=FIGURE_KINDS,
                   help="figure kind")
    p.add_argument("--out", required=True, help="output image path (PNG)")
    p.add_argument("--oracle-dir", default=None,
                   help="reference run directory for overlay kinds "
                   "(defaults to --input-dir)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        spec = spec_for(args.figure, args.input_dir, args.out,
                        oracle_dir=args.oracle_dir)
        path = render(spec)
    except FigureError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
