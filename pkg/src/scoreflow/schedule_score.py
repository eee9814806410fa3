"""Noise schedules and analytic time-dependent vector fields.

Everything here is an exact function of the curve target: the forward
Ornstein-Uhlenbeck kernel has mean m(t) x0 and variance sigma(t)^2 =
1 - m(t)^2, so the marginal density is a quadrature sum of Gaussians and
the score, its Jacobian, and the flow-matching marginal field all reduce
to posterior moments of the curve points.  All posterior sums run in the
log domain: at the early-stopping time the kernel width is ~1e-3 and raw
weights underflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from .manifold import CurveManifold, QuadratureRule

if TYPE_CHECKING:  # pragma: no cover
    from .dynamics import PerturbationSpec


class ScheduleSingularityError(ValueError):
    """Time pushes the cosine schedule argument to pi/2."""


class SingularTimeError(ValueError):
    """Evaluation at a time where the kernel width vanishes."""


def cosine_beta(t, delta: float = 0.008):
    """Cosine-schedule rate beta_t = pi/(1+delta) * tan(u),
    u = (pi/2)(t+delta)/(1+delta).

    Positive and increasing on the valid window; raises once u reaches
    pi/2 (t -> 1).
    """
    t = np.asarray(t, dtype=float)
    u = 0.5 * math.pi * (t + delta) / (1.0 + delta)
    if np.any(u >= 0.5 * math.pi * (1.0 - 1e-12)):
        raise ScheduleSingularityError(
            "cosine schedule singular: t too close to 1")
    out = (math.pi / (1.0 + delta)) * np.tan(u)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine noise schedule and integration window.

    m(t) = f(t)/f(0) with f(t) = cos^2((pi/2)(t+delta)/(1+delta)) equals
    exp(-int_0^t beta), and sigma(t)^2 = 1 - m(t)^2 is the marginal
    deviation of the forward kernel.  The reverse process integrates from
    t = horizon down to t = early_stop in n_steps Euler steps.
    """

    delta: float = 0.008
    horizon: float = 0.9
    early_stop: float = 0.9 / 4000
    n_steps: int = 4000

    def __post_init__(self):
        if not 0 < self.early_stop < self.horizon:
            raise ValueError("need 0 < early_stop < horizon")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        # horizon must stay inside the schedule's valid window
        cosine_beta(self.horizon, self.delta)

    @property
    def dt(self) -> float:
        return (self.horizon - self.early_stop) / self.n_steps

    def beta(self, t):
        return cosine_beta(t, self.delta)

    def _u(self, t):
        return 0.5 * math.pi * (np.asarray(t, dtype=float) + self.delta) / (1.0 + self.delta)

    def mean_scale(self, t):
        """m(t) = cos^2(u(t)) / cos^2(u(0)); m(0) = 1 exactly."""
        c = np.cos(self._u(t))
        c0 = math.cos(self._u(0.0))
        out = (c * c) / (c0 * c0)
        return float(out) if out.ndim == 0 else out

    def sigma2(self, t):
        """1 - m(t)^2 via a cancellation-free product form."""
        u = self._u(t)
        u0 = self._u(0.0)
        c2 = np.cos(u) ** 2
        c02 = math.cos(u0) ** 2
        # cos^2 u0 - cos^2 u = sin(u0+u) sin(u-u0)
        diff = np.sin(u0 + u) * np.sin(u - u0)
        out = diff * (c02 + c2) / (c02 * c02)
        return float(out) if out.ndim == 0 else out

    def sigma(self, t):
        return np.sqrt(self.sigma2(t))

    def step_times(self) -> np.ndarray:
        """Forward times visited by the reverse steps: T-(n+1)dt, so the
        last update is evaluated at early_stop."""
        n = np.arange(self.n_steps)
        return self.horizon - (n + 1) * self.dt

    def config(self) -> dict:
        return {"delta": self.delta, "T": self.horizon,
                "Delta": self.early_stop, "n_steps": self.n_steps}


@dataclass(frozen=True)
class PosteriorMoments:
    """Log marginal density and posterior mean/covariance of the curve point."""

    log_z: float
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class DriftModel:
    """A time-dependent drift field over a curve target.

    kind:
      sgm_reverse       reverse-SDE drift beta (y + 2 s)
      prob_flow_reverse probability-flow drift beta (y + s)
      cfm               flow-matching marginal field (independent coupling)
    """

    kind: str
    manifold: CurveManifold
    quad: QuadratureRule
    schedule: NoiseSchedule
    sigma_min: float = 0.1
    cfm_early_stop: float = 2.5e-4
    perturbation: Optional["PerturbationSpec"] = None
    eps: float = 0.0
    _pp: np.ndarray = field(default=None, repr=False, compare=False)

    KINDS = ("sgm_reverse", "prob_flow_reverse", "cfm")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown drift kind {self.kind!r}")
        if self.kind == "cfm" and not 0 < self.cfm_early_stop < 1:
            raise ValueError("cfm_early_stop must lie in (0, 1)")

    @property
    def ambient_dim(self) -> int:
        return self.manifold.ambient_dim

    @property
    def n_steps(self) -> int:
        return self.schedule.n_steps

    def node_outer(self) -> np.ndarray:
        """Cached (N, D, D) outer products of quadrature points."""
        if self._pp is None:
            pts = self.quad.points
            self._pp = pts[:, :, None] * pts[:, None, :]
        return self._pp

    # step time grids -----------------------------------------------------

    def step_time(self, n: int) -> float:
        """Forward time used by reverse step n (SGM kinds) or the CFM
        interpolation time t_n = n * dt_cfm."""
        if not 0 <= n < self.n_steps:
            raise IndexError(f"step index {n} outside [0, {self.n_steps})")
        if self.kind == "cfm":
            return n * self.cfm_dt
        return self.schedule.horizon - (n + 1) * self.schedule.dt

    @property
    def cfm_dt(self) -> float:
        return (1.0 - self.cfm_early_stop) / self.n_steps

    @property
    def dt(self) -> float:
        return self.cfm_dt if self.kind == "cfm" else self.schedule.dt

    def end_time(self) -> float:
        """Time at which the final state's marginal lives."""
        if self.kind == "cfm":
            return 1.0 - self.cfm_early_stop
        return self.schedule.early_stop

    def config(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "cfm":
            out["sigma_min"] = self.sigma_min
            out["cfm_early_stop"] = self.cfm_early_stop
        return out


# -- posterior machinery (batched; public single-point ops wrap these) ----


def _moments_batch(x, mean_scale, width, quad, need_cov=False, node_outer=None):
    """Gaussian-kernel posterior over quadrature nodes.

    x : (B, D); kernel N(mean_scale * node, width^2 I).
    Returns (log_z (B,), mean (B, D), cov (B, D, D) or None).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    pts = quad.points
    a = mean_scale
    s2 = width * width
    # einsum (not @) keeps results bitwise independent of the batch shape;
    # BLAS picks shape-dependent kernels
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - (2.0 * a) * np.einsum("bk,nk->bn", x, pts)
        + (a * a) * np.sum(pts * pts, axis=1)[None, :]
    )
    logw = quad.log_weights[None, :] - d2 / (2.0 * s2)
    mx = np.max(logw, axis=1, keepdims=True)
    wn = np.exp(logw - mx)
    z = np.sum(wn, axis=1)
    log_z = (mx[:, 0] + np.log(z)
             - 0.5 * x.shape[1] * math.log(2.0 * math.pi * s2))
    w = wn / z[:, None]
    mean = np.einsum("bn,nd->bd", w, pts)
    cov = None
    if need_cov:
        if node_outer is None:
            node_outer = pts[:, :, None] * pts[:, None, :]
        exx = np.einsum("bn,nij->bij", w, node_outer)
        cov = exx - mean[:, :, None] * mean[:, None, :]
    return log_z, mean, cov, w


def _check_time(t, schedule):
    if t <= 0:
        raise SingularTimeError(f"kernel width vanishes at t = {t}")
    if t > schedule.horizon + 1e-12:
        raise ValueError(f"t = {t} beyond the schedule horizon")


def posterior_moments(x, t, quad: QuadratureRule,
                      schedule: NoiseSchedule) -> PosteriorMoments:
    """Posterior moments of the curve point given a noised observation.

    Weights w_i propto exp(log_weight_i - |x - m(t) G_i|^2 / (2 sigma(t)^2))
    normalized in the log domain; log_z is the log marginal density.
    """
    _check_time(t, schedule)
    m = schedule.mean_scale(t)
    sig = schedule.sigma(t)
    log_z, mean, cov, _ = _moments_batch(x, m, sig, quad, need_cov=True)
    return PosteriorMoments(log_z=float(log_z[0]), mean=mean[0], cov=cov[0])


def score(x, t, model: DriftModel):
    """Marginal score s_t(x) = (m(t) mu_hat(x,t) - x) / sigma(t)^2."""
    return _score_batch(np.atleast_2d(np.asarray(x, dtype=float)), t, model)[0]


def _score_batch(x, t, model):
    _check_time(t, model.schedule)
    m = model.schedule.mean_scale(t)
    s2 = model.schedule.sigma2(t)
    _, mean, _, _ = _moments_batch(x, m, math.sqrt(s2), model.quad)
    return (m * mean - x) / s2


def score_jacobian(x, t, model: DriftModel):
    """Analytic score Jacobian -I/sigma^2 + m^2 C_hat / sigma^4 (symmetric)."""
    return _score_jacobian_batch(
        np.atleast_2d(np.asarray(x, dtype=float)), t, model)[1][0]


def _score_jacobian_batch(x, t, model):
    """Returns (score (B, D), jacobian (B, D, D))."""
    _check_time(t, model.schedule)
    m = model.schedule.mean_scale(t)
    s2 = model.schedule.sigma2(t)
    _, mean, cov, _ = _moments_batch(
        x, m, math.sqrt(s2), model.quad, need_cov=True,
        node_outer=model.node_outer())
    sc = (m * mean - x) / s2
    d = x.shape[1]
    jac = (m * m / (s2 * s2)) * cov
    idx = np.arange(d)
    jac[:, idx, idx] -= 1.0 / s2
    return sc, jac


def score_hessian(x, t, model: DriftModel, method: str = "fd"):
    """Second derivative tensor H[i, j, k] = d^2 s_i / dx_j dx_k.

    Default is central finite differences of the analytic Jacobian with a
    1e-4 relative step; method="analytic" uses posterior third central
    moments, m^3 M3 / sigma^6.
    """
    x = np.asarray(x, dtype=float)
    d = len(x)
    if method == "analytic":
        _check_time(t, model.schedule)
        m = model.schedule.mean_scale(t)
        s2 = model.schedule.sigma2(t)
        _, mean, _, w = _moments_batch(
            x[None], m, math.sqrt(s2), model.quad)
        c = model.quad.points - mean[0]
        m3 = np.einsum("n,ni,nj,nk->ijk", w[0], c, c, c)
        return (m**3 / s2**3) * m3
    if method != "fd":
        raise ValueError(f"unknown score_hessian method {method!r}")
    h = 1e-4 * (1.0 + np.linalg.norm(x))
    out = np.empty((d, d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        jp = score_jacobian(x + e, t, model)
        jm = score_jacobian(x - e, t, model)
        out[:, :, k] = (jp - jm) / (2.0 * h)
    return out


def default_mode(model: DriftModel) -> str:
    """Canonical integrator for a drift kind: the reverse SDE for
    sgm_reverse, explicit-Euler ODE otherwise."""
    return "sde" if model.kind == "sgm_reverse" else "ode"


def _score_factor(mode: str) -> float:
    if mode == "sde":
        return 2.0
    if mode == "ode":
        return 1.0
    raise ValueError(f"unknown mode {mode!r}")


def reverse_drift(y, n: int, model: DriftModel, mode: str | None = None):
    """Drift of reverse step n at state y.

    SDE mode:  beta_t (y + 2 s_t(y) [+ eps chi_t(y)])
    ODE mode:  beta_t (y + s_t(y) [+ eps chi_t(y)])  (probability flow)
    with t = T - t_n the forward time of step n.
    """
    y = np.asarray(y, dtype=float)
    return _drift_batch(y[None], n, model, mode)[0]


def _drift_batch(y, n, model, mode=None):
    t = model.step_time(n)
    mode = mode or default_mode(model)
    if model.kind == "cfm":
        u = _cfm_field_batch(y, t, model)
        if model.perturbation is not None and model.eps != 0.0:
            u = u + model.eps * model.perturbation.evaluate(t, y)
        return u
    b = model.schedule.beta(t)
    inner = y + _score_factor(mode) * _score_batch(y, t, model)
    if model.perturbation is not None and model.eps != 0.0:
        inner = inner + model.eps * model.perturbation.evaluate(t, y)
    return b * inner


def _drift_jacobian_batch(y, n, model, mode=None):
    """Jacobian of the drift field at each state (B, D, D)."""
    t = model.step_time(n)
    mode = mode or default_mode(model)
    if model.kind == "cfm":
        jac = _cfm_jacobian_batch(y, t, model)[1]
        if model.perturbation is not None and model.eps != 0.0:
            jac = jac + model.eps * model.perturbation.jacobian(t, y)
        return jac
    b = model.schedule.beta(t)
    _, js = _score_jacobian_batch(y, t, model)
    jac = _score_factor(mode) * js
    d = y.shape[1]
    idx = np.arange(d)
    jac[:, idx, idx] += 1.0
    if model.perturbation is not None and model.eps != 0.0:
        jac = jac + model.eps * model.perturbation.jacobian(t, y)
    return b * jac


def _third_central_batch(x, mean_scale, width, quad):
    """Posterior third central moment tensor (B, D, D, D)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    _, mean, _, w = _moments_batch(x, mean_scale, width, quad)
    c = quad.points[None, :, :] - mean[:, None, :]
    return np.einsum("bn,bni,bnj,bnk->bijk", w, c, c, c)


def _drift_hessian_batch(y, n, model, mode=None):
    """Second derivative of the drift field, H[b, i, j, k]; analytic."""
    t = model.step_time(n)
    mode = mode or default_mode(model)
    if model.kind == "cfm":
        sc = _cfm_width(t, model)
        h = (t * t / sc**5) * _third_central_batch(y, t, sc, model.quad)
        if model.perturbation is not None and model.eps != 0.0:
            h = h + model.eps * model.perturbation.hessian(t, y)
        return h
    m = model.schedule.mean_scale(t)
    s2 = model.schedule.sigma2(t)
    b = model.schedule.beta(t)
    h = (_score_factor(mode) * m**3 / s2**3) * _third_central_batch(
        y, m, math.sqrt(s2), model.quad)
    if model.perturbation is not None and model.eps != 0.0:
        h = h + model.eps * model.perturbation.hessian(t, y)
    return b * h


def cfm_sigma(t, sigma_min: float):
    """Conditional path width sigma_c(t) = (1 - t) + t sigma_min."""
    return (1.0 - t) + t * sigma_min


def cfm_field(x, t, model: DriftModel):
    """Marginal flow-matching field for the Gaussian path
    x_t | x1 ~ N(t x1, sigma_c(t)^2 I), independent coupling.

    Closed form u_t(x) = (mu1_hat(x, t) - (1 - sigma_min) x) / sigma_c(t);
    algebraically identical to sigma_c'(t)/sigma_c(t) (x - t mu1_hat) +
    mu1_hat for this path family.
    """
    return _cfm_field_batch(np.atleast_2d(np.asarray(x, dtype=float)), t, model)[0]


def _cfm_width(t, model):
    sc = cfm_sigma(t, model.sigma_min)
    if sc <= 0:
        raise SingularTimeError(
            f"flow-matching path width vanished at t = {t}; needs sigma_min > 0")
    return sc


def _cfm_field_batch(x, t, model):
    sc = _cfm_width(t, model)
    _, mean1, _, _ = _moments_batch(x, t, sc, model.quad)
    return (mean1 - (1.0 - model.sigma_min) * x) / sc


def _cfm_jacobian_batch(x, t, model):
    """Returns (field (B, D), jacobian (B, D, D))."""
    sc = _cfm_width(t, model)
    _, mean1, cov1, _ = _moments_batch(
        x, t, sc, model.quad, need_cov=True, node_outer=model.node_outer())
    u = (mean1 - (1.0 - model.sigma_min) * x) / sc
    d = x.shape[1]
    jac = (t / sc**3) * cov1
    idx = np.arange(d)
    jac[:, idx, idx] -= (1.0 - model.sigma_min) / sc
    return u, jac


def end_score(model: DriftModel, x):
    """Score of the model's end-time marginal, batched.

    SGM kinds: the forward marginal score at the early-stop time.  CFM:
    the score of target convolved down the flow path, i.e. of
    q * N(t_end x1, sigma_c(t_end)^2 I).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if model.kind == "cfm":
        t_end = 1.0 - model.cfm_early_stop
        sc = _cfm_width(t_end, model)
        _, mean1, _, _ = _moments_batch(x, t_end, sc, model.quad)
        return (t_end * mean1 - x) / (sc * sc)
    return _score_batch(x, model.schedule.early_stop, model)


def field_dump(model: DriftModel, ts, grid_points, path,
               include_jacobian: bool = False):
    """Write grid evaluations of the drift field as CSV.

    Columns: t,x0,x1,v0,v1[,j00,j01,j10,j11].  Planar models only.
    """
    if model.ambient_dim != 2:
        raise ValueError("field_dump is defined for planar models")
    grid_points = np.asarray(grid_points, dtype=float)
    rows = []
    for t in np.atleast_1d(ts):
        n = _nearest_step(model, float(t))
        if include_jacobian:
            v = _drift_batch(grid_points, n, model)
            jac = _drift_jacobian_batch(grid_points, n, model)
            for p, vv, jj in zip(grid_points, v, jac):
                rows.append([t, p[0], p[1], vv[0], vv[1],
                             jj[0, 0], jj[0, 1], jj[1, 0], jj[1, 1]])
        else:
            v = _drift_batch(grid_points, n, model)
            for p, vv in zip(grid_points, v):
                rows.append([t, p[0], p[1], vv[0], vv[1]])
    header = "t,x0,x1,v0,v1"
    if include_jacobian:
        header += ",j00,j01,j10,j11"
    _write_csv(path, header, rows)


def _nearest_step(model, t):
    """Step index whose evaluation time is closest to forward time t."""
    if model.kind == "cfm":
        n = round(t / model.cfm_dt)
    else:
        n = round((model.schedule.horizon - t) / model.schedule.dt) - 1
    return int(min(max(n, 0), model.n_steps - 1))


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
