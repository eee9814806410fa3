#!/usr/bin/env python3
"""Drift errors and where their effect lands.

Attaches a frozen random-Fourier error field to the reverse drift, sweeps
its strength with common random numbers, and separates the displacement
of each generated sample into motion along the curve vs off it.  Then
cross-checks finite-difference observable responses against the
first-order tangent estimate.
"""

import os

import numpy as np

from scoreflow import DriftModel, NoiseSchedule, build_curve, quadrature_nodes
from scoreflow.analysis import (
    CoordinateMean,
    SmoothedDiskMass,
    response_consistency,
    support_shift,
)
from scoreflow.dynamics import PerturbationSpec
from scoreflow.manifold import point_target
from scoreflow.runio import write_csv

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

moons = build_curve("two_moons")
n_steps = 600
schedule = NoiseSchedule(n_steps=n_steps, early_stop=0.9 / n_steps)
model = DriftModel("sgm_reverse", moons, quadrature_nodes(moons, 256), schedule)
chi = PerturbationSpec.random_fourier(2, seed=42, sup_norm=1.0)

print("== support shift under a sup-norm-1 drift error ==")
shift = support_shift(model, [0.0, 0.1, 0.5], chi, 2000, seed=3)
print(f"{'eps':>5} {'rms tan':>9} {'rms norm':>9} {'q95 dist':>9}")
for row in shift.rows:
    print(f"{row.eps:5.2f} {row.rms_tangential:9.4f} {row.rms_normal:9.4f} "
          f"{row.q95_dist:9.4f}")
print(f"unperturbed q95 distance: {shift.baseline_q95:.4f}")
print("the support barely moves; most displacement is along the curve")
write_csv(os.path.join(OUT, "support_shift.csv"),
          "epsilon,rms_tan,rms_norm,q50_dist,q95_dist",
          ([r.eps, r.rms_tangential, r.rms_normal, r.q50_dist, r.q95_dist]
           for r in shift.rows))

print("\n== FD response vs tangent estimate (point-mass closed form) ==")
pm = point_target((0.0, 0.0))
pm_model = DriftModel("sgm_reverse", pm, quadrature_nodes(pm, 2, floor=2),
                      NoiseSchedule(n_steps=2000, early_stop=0.9 / 2000))
const = PerturbationSpec.constant((1.0, 0.0), sup_norm=1.0)
table = response_consistency(pm_model, CoordinateMean(0), const,
                             [1e-2, 5e-3, 2.5e-3], 1000, seed=5)
print(f"tangent estimate D_lin = {table.lin_estimate:.6f}")
for row in table.rows:
    print(f"eps={row.eps:7.4f}: FD estimate {row.fd_estimate:.6f}")
print(f"residuals at roundoff floor: {table.converged_exact}")

print("\n== observable response localizes on the support ==")
on = SmoothedDiskMass(center=moons.point(1, 0.5), radius=0.15, width=0.05)
off = SmoothedDiskMass(center=(0.5, 1.6), radius=0.15, width=0.05)
for name, disk in (("on-support", on), ("off-support", off)):
    tab = response_consistency(model, disk, chi, [1e-2], 2000, seed=7)
    z = abs(tab.lin_estimate) / tab.lin_std_err
    print(f"{name:12s} disk: D_lin = {tab.lin_estimate:+.2e} "
          f"({z:.1f} standard errors)")
print(f"wrote {OUT}/support_shift.csv")
