"""Tangent-space machinery: QR frame propagation, finite-time Lyapunov
exponents and backward Lyapunov vectors, Cauchy-Green spectra, and the
inhomogeneous tangent (error-response) recursion.

Exponents are normalized per unit integrated time tau_eff = n_steps * dt;
reports also carry the raw log-stretch sums since plot conventions differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DegenerateTangentError, TrajectoryBundle, _sign_fixed_qr


@dataclass(frozen=True)
class LyapunovReport:
    """Finite-time spectrum of one trajectory bundle.

    exponents[i] equals raw_sums[i] / tau_eff exactly, raw_sums being the
    per-column sums of log_r_history (columns permuted into nonincreasing
    exponent order; column_order maps back to QR frame columns).
    """

    exponents: np.ndarray
    final_frame: np.ndarray
    log_r_history: np.ndarray
    raw_sums: np.ndarray
    tau_eff: float
    column_order: np.ndarray


def init_frame(ambient_dim, k, seed):
    """Random orthonormal D x k frame: QR of a seeded Gaussian matrix with
    the R diagonal made positive."""
    if not 1 <= k <= ambient_dim:
        raise ValueError("need 1 <= k <= ambient_dim")
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    q, _ = _sign_fixed_qr(g.standard_normal((ambient_dim, k)))
    return q


def qr_push(frame, jac):
    """Advance an orthonormal frame through one Jacobian: J E = E' R.

    Returns (E', r, R) with R upper triangular, positive diagonal r
    (column signs flipped to enforce the convention), E' orthonormal.
    """
    frame = np.asarray(frame, dtype=float)
    jac = np.asarray(jac, dtype=float)
    v = jac @ frame
    q, r = _sign_fixed_qr(v)
    diag = np.diagonal(r)
    if np.any(np.abs(diag) < 1e-14):
        raise DegenerateTangentError(
            "tangent image rank-deficient: |R_ii| < 1e-14")
    return q, np.abs(diag), r


def ftle(bundle: TrajectoryBundle, k=None) -> LyapunovReport:
    """Finite-time Lyapunov exponents from a tracked bundle.

    lambda_i = (1/tau_eff) sum_n log R_{n,ii}, reported in nonincreasing
    order; the final frame columns are permuted the same way, so the first
    column estimates the most sensitive direction at the final time.
    """
    if bundle.log_r is None:
        raise ValueError("bundle has no tangent history; simulate with "
                         "tangent_k set")
    stored = bundle.log_r.shape[1]
    k = stored if k is None else k
    if k > stored:
        raise ValueError(f"requested k={k} exceeds tracked frame dim {stored}")
    hist = np.ascontiguousarray(bundle.log_r[:, :k])
    sums = hist.sum(axis=0)
    order = np.argsort(-sums, kind="stable")
    sums = sums[order]
    # keep the stored history C-contiguous so summing it reproduces
    # raw_sums bitwise
    hist = np.ascontiguousarray(hist[:, order])
    frame = bundle.final_frame[:, :k][:, order]
    return LyapunovReport(
        exponents=sums / bundle.tau_eff,
        final_frame=frame,
        log_r_history=hist,
        raw_sums=sums,
        tau_eff=bundle.tau_eff,
        column_order=order,
    )


CG_MAX_STEPS = 200


class CauchyGreenOverflowError(RuntimeError):
    """Direct Jacobian product is unsafe at this horizon."""


def cauchy_green_top(bundle: TrajectoryBundle, k, start=0, stop=None):
    """Top-k eigenpairs of the Cauchy-Green tensor dF^tau (dF^tau)^T over
    the step window [start, stop).

    Only valid for short horizons where the direct product does not
    overflow; otherwise raises and the QR route (ftle) must be used.
    Eigenvalues relate to exponents by log(eig)/2 tau_eff.
    """
    if bundle.jacobians is None:
        raise ValueError("bundle has no recorded Jacobians")
    stop = len(bundle.jacobians) if stop is None else stop
    span = stop - start
    if span > CG_MAX_STEPS:
        raise CauchyGreenOverflowError(
            f"window of {span} steps exceeds {CG_MAX_STEPS}; accumulate "
            "with the QR route (ftle) instead")
    prod = np.eye(bundle.jacobians.shape[1])
    for n in range(start, stop):
        prod = bundle.jacobians[n] @ prod
    if not np.all(np.isfinite(prod)):
        raise CauchyGreenOverflowError(
            "Jacobian product overflowed; use the QR route (ftle)")
    cg = prod @ prod.T
    vals, vecs = np.linalg.eigh(cg)
    idx = np.argsort(vals)[::-1][:k]
    return vals[idx], vecs[:, idx]


def inhomogeneous_response(bundle: TrajectoryBundle, chi):
    """Propagate the first-order response to a drift error field chi.

    zeta_{n+1} = dF_n zeta_n + dt beta_n chi(t_n, y_n), zeta_0 = 0 (the
    forcing is evaluated at the pre-step state, matching the perturbation
    placement of the step map exactly).  Returns (history, zeta_final);
    eps * zeta_final predicts the final-state displacement per unit eps.
    """
    if bundle.states is None or bundle.jacobians is None:
        raise ValueError("bundle needs recorded states and Jacobians")
    n_steps = len(bundle.jacobians)
    d = bundle.states.shape[1]
    hist = np.zeros((n_steps + 1, d))
    zeta = np.zeros(d)
    for n in range(n_steps):
        force = chi.evaluate(bundle.step_times[n], bundle.states[n][None])[0]
        zeta = bundle.jacobians[n] @ zeta + bundle.forcing_scale[n] * force
        hist[n + 1] = zeta
    return hist, zeta
