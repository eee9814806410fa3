"""Artifact writing: CSV files with stable formatting, run manifests with
per-file checksums, and the manifest verifier.

Floats are rendered with %.17g so a value round-trips exactly; identical
arrays therefore produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import time

import numpy as np


def format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def write_csv(path, header, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(format_value(v) for v in row) + "\n")


def write_points_csv(path, points):
    """Point cloud with the documented header x0,x1,...,x{D-1}."""
    points = np.asarray(points, dtype=float)
    header = ",".join(f"x{i}" for i in range(points.shape[1]))
    write_csv(path, header, points)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, subcommand, cfg, files, started, extra=None):
    """Checksums every artifact and writes manifest.json (always last)."""
    import scoreflow

    manifest = {
        "subcommand": subcommand,
        "config": cfg,
        "seed": cfg["run"]["seed"],
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scoreflow": scoreflow.__version__,
        },
        "files": {name: sha256_file(os.path.join(out_dir, name))
                  for name in sorted(files)},
        "wall_time_s": round(time.monotonic() - started, 3),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def verify_manifest(out_dir):
    """Re-checks every file listed in manifest.json.

    Returns a list of problems (empty when everything matches).
    """
    path = os.path.join(out_dir, "manifest.json")
    if not os.path.exists(path):
        return [f"no manifest.json in {out_dir}"]
    with open(path) as fh:
        manifest = json.load(fh)
    problems = []
    for name, digest in manifest.get("files", {}).items():
        full = os.path.join(out_dir, name)
        if not os.path.exists(full):
            problems.append(f"missing file {name}")
        elif sha256_file(full) != digest:
            problems.append(f"checksum mismatch for {name}")
    return problems
