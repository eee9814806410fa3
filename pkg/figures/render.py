#!/usr/bin/env python3
"""Script entry point: python figures/render.py <kind> --spec PATH."""

import sys

from flowfigs.cli import main

if __name__ == "__main__":
    sys.exit(main())
