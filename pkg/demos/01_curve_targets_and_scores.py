#!/usr/bin/env python3
"""Curve-supported targets and their analytic score fields.

Walks through the target zoo: builds the shapes, samples them exactly,
checks quadrature against Monte Carlo, and dumps a score field grid that
the flowfigs `quiver` renderer can draw.
"""

import os

import numpy as np

from scoreflow import (
    DriftModel,
    NoiseSchedule,
    build_curve,
    field_dump,
    posterior_moments,
    quadrature_nodes,
    sample_target,
    score,
)
from scoreflow.runio import write_points_csv

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

print("== the target zoo ==")
for kind, params in [("circle", {"radius": 1.0}),
                     ("two_moons", {}),
                     ("segment", {"p0": (0, 0), "p1": (1, 0)}),
                     ("s_curve", {})]:
    m = build_curve(kind, params)
    print(f"{kind:10s}: {len(m.arcs)} arc(s), total length {m.total_length:.4f}")

moons = build_curve("two_moons")
quad = quadrature_nodes(moons, 256)
schedule = NoiseSchedule(n_steps=1000, early_stop=0.9 / 1000)
model = DriftModel("sgm_reverse", moons, quad, schedule)

print("\n== sampling vs quadrature ==")
xs = sample_target(moons, 50_000, rng_seed=0)
quad_mean = np.exp(quad.log_weights) @ quad.points
print(f"sample mean    {xs.mean(axis=0).round(4)}")
print(f"quadrature mean {quad_mean.round(4)}")
dist, _, _, _, _ = moons.project_points(xs[:1000])
print(f"max sample distance to the curve: {dist.max():.2e}")

print("\n== the score points at the target ==")
for t in (0.85, 0.5, 0.1):
    probe = np.array([1.5, 1.0])
    s = score(probe, t, model)
    pm = posterior_moments(probe, t, quad, schedule)
    print(f"t={t:4.2f}: |score({probe})| = {np.linalg.norm(s):8.3f}, "
          f"posterior mean -> {pm.mean.round(3)}")

# artifacts for rendering: curve polyline + field grids at three times
two = np.concatenate([moons.point(j, np.linspace(0, 1, 100)) for j in (0, 1)])
write_points_csv(os.path.join(OUT, "curve.csv"), two)
g = np.linspace(-1.8, 2.8, 14)
grid = np.array([(x, y) for x in g for y in np.linspace(-1.5, 1.8, 12)])
field_dump(model, [0.85, 0.5, 0.1], grid, os.path.join(OUT, "score_field.csv"))
print(f"\nwrote {OUT}/curve.csv and {OUT}/score_field.csv")
print("render with: python figures/render.py quiver --spec <spec.json>")
