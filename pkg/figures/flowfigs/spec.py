"""Figure specifications and CSV/JSON input loading.

Render-only: this package never recomputes science.  Inputs are the CSV
and JSON artifacts written by the experiment CLI; a missing column fails
loudly, naming the column and the file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

KINDS = ("density", "kde-panels", "quiver", "lv-overlay", "alignment-hist",
         "le-spectrum")


class MissingColumnError(ValueError):
    def __init__(self, column, path):
        super().__init__(f"missing column {column!r} in {path}")
        self.column = column
        self.path = path


@dataclass
class FigureSpec:
    kind: str
    inputs: dict
    output: str
    dpi: int = 150
    axis_limits: list | None = None
    overlays: dict = field(default_factory=dict)
    titles: list = field(default_factory=list)
    lv_length: float = 0.12   # style parameter, not data
    bins: int = 40

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        known = {"kind", "inputs", "output", "dpi", "axis_limits",
                 "overlays", "titles", "lv_length", "bins"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown figure-spec keys: {sorted(unknown)}")
        if raw.get("kind") not in KINDS:
            raise ValueError(
                f"figure kind must be one of {KINDS}, got {raw.get('kind')!r}")
        if "inputs" not in raw or "output" not in raw:
            raise ValueError("figure spec needs 'inputs' and 'output'")
        return cls(**raw)


def read_csv(path, required):
    """Load a CSV with a header row; returns {column: array}."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    for col in required:
        if col not in header:
            raise MissingColumnError(col, path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(header):
        raise ValueError(f"malformed CSV {path}")
    return {name: data[:, i] for i, name in enumerate(header)}


def read_kde(path):
    cols = read_csv(path, ("x0", "x1", "density"))
    xs = np.unique(cols["x0"])
    ys = np.unique(cols["x1"])
    z = cols["density"].reshape(len(ys), len(xs))
    return xs, ys, z


def read_lyapunov(path):
    with open(path) as fh:
        data = json.load(fh)
    for key in ("mean_exponents", "tau_eff"):
        if key not in data:
            raise MissingColumnError(key, path)
    return data
