"""Command line entry: render <kind> --spec PATH."""

from __future__ import annotations

import argparse
import sys

from .render import render
from .spec import KINDS, FigureSpec


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="flowfigs", description="Render one figure from CSV/JSON inputs")
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--spec", required=True, help="figure-spec JSON path")
    args = parser.parse_args(argv)
    try:
        spec = FigureSpec.load(args.spec)
        out = render(args.kind, spec)
    except (OSError, ValueError) as err:
        print(f"render: {err}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
