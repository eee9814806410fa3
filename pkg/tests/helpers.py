"""Shared fixtures and independent oracles for the test suite.

The oracles here deliberately avoid the library's posterior code paths:
Monte Carlo ratio estimators work from raw target samples, the dense
posterior works from a trapezoid node table, and the linear-recursion
oracle unrolls the point-mass dynamics in closed form.
"""

import math

import numpy as np

from scoreflow.manifold import build_curve, point_target, quadrature_nodes
from scoreflow.schedule_score import DriftModel, NoiseSchedule


def make_model(kind="sgm_reverse", target="two_moons", target_params=None,
               ambient_dim=2, per_arc=256, n_steps=4000, horizon=0.9,
               early_stop=None, sigma_min=0.1, perturbation=None, eps=0.0):
    if target == "point":
        m = point_target(**(target_params or {}), ambient_dim=ambient_dim)
        quad = quadrature_nodes(m, 2, floor=2)
    else:
        m = build_curve(target, target_params, ambient_dim=ambient_dim)
        quad = quadrature_nodes(m, per_arc, floor=2)
    # early stop scales with the grid (Delta = T/n_steps) so the final
    # explicit-Euler steps stay inside the stability region
    sched = NoiseSchedule(horizon=horizon,
                          early_stop=early_stop or horizon / n_steps,
                          n_steps=n_steps)
    return DriftModel(kind, m, quad, sched, sigma_min=sigma_min,
                      perturbation=perturbation, eps=eps)


def mc_score_oracle(manifold, probe, t, schedule, n=10**6, seed=0,
                    samples=None):
    """Monte Carlo ratio estimator of the marginal score at one probe.

    s(x) = E[w g] / E[w], w = exp(-|x - m x0|^2 / 2 sigma^2),
    g = (m x0 - x) / sigma^2, x0 ~ p_data.  Standard errors by the delta
    method for the ratio.  Returns (estimate, se) per component.
    """
    if samples is None:
        samples = manifold.sample(n, seed)
    x = np.asarray(probe, dtype=float)
    m = schedule.mean_scale(t)
    s2 = schedule.sigma2(t)
    d2 = np.sum((x[None, :] - m * samples) ** 2, axis=1)
    logw = -d2 / (2.0 * s2)
    logw -= logw.max()
    w = np.exp(logw)
    g = (m * samples - x[None, :]) / s2
    wbar = w.mean()
    num = (w[:, None] * g).mean(axis=0)
    est = num / wbar
    phi = w[:, None] * (g - est[None, :])
    se = phi.std(axis=0, ddof=1) / (math.sqrt(len(w)) * wbar)
    return est, se


def mc_cfm_oracle(manifold, probe, t, sigma_min, n=10**6, seed=0,
                  samples=None):
    """Monte Carlo conditional-expectation oracle for the CFM field.

    u(x) = (E[x1 | x_t = x] - (1 - sigma_min) x) / sigma_c with the exact
    conditional kernel N(x; t x1, sigma_c^2 I) as the regression weight
    (unbiased kernel regression).  Returns (estimate, se).
    """
    if samples is None:
        samples = manifold.sample(n, seed)
    x = np.asarray(probe, dtype=float)
    sc = (1.0 - t) + t * sigma_min
    d2 = np.sum((x[None, :] - t * samples) ** 2, axis=1)
    logw = -d2 / (2.0 * sc * sc)
    logw -= logw.max()
    w = np.exp(logw)
    wbar = w.mean()
    mu1 = (w[:, None] * samples).mean(axis=0) / wbar
    est = (mu1 - (1.0 - sigma_min) * x) / sc
    phi = w[:, None] * (samples - mu1[None, :])
    se_mu = phi.std(axis=0, ddof=1) / (math.sqrt(len(w)) * wbar)
    return est, se_mu / sc


def dense_posterior_oracle(manifold, x, mean_scale, width, nodes_per_arc=200_001):
    """Brute-force trapezoid posterior over a dense parameter grid."""
    x = np.asarray(x, dtype=float)
    logs = []
    pts_all = []
    for j in range(len(manifold.arcs)):
        s = np.linspace(0.0, 1.0, nodes_per_arc)
        pts = manifold.point(j, s)
        speed = np.linalg.norm(manifold.velocity(j, s), axis=1)
        q = manifold.density(j, s)
        w = q * speed
        w[0] *= 0.5
        w[-1] *= 0.5
        w /= nodes_per_arc - 1
        d2 = np.sum((x[None, :] - mean_scale * pts) ** 2, axis=1)
        logs.append(np.log(w) - d2 / (2.0 * width**2))
        pts_all.append(pts)
    logw = np.concatenate(logs)
    pts = np.concatenate(pts_all)
    logw -= logw.max()
    w = np.exp(logw)
    w /= w.sum()
    mean = w @ pts
    cov = (w[:, None, None] * (pts - mean)[:, :, None]
           * (pts - mean)[:, None, :]).sum(axis=0)
    return mean, cov


class LinearOracle:
    """Closed-form recursion for the point-mass target at the origin.

    The reverse SDE is then linear: y_{n+1} = a_n y_n + b_n xi_n + eps f_n,
    a_n = 1 + beta dt (1 - c / sigma_t^2 * ...) -- concretely
    a_n = 1 + beta_n dt (1 - c / sigma^2(t_n)), b_n = sqrt(2 beta_n dt),
    f_n = beta_n dt chi (constant fields), t_n the forward time of step n.
    """

    def __init__(self, schedule, c=2.0):
        self.schedule = schedule
        ts = schedule.step_times()
        beta = np.array([schedule.beta(t) for t in ts])
        s2 = np.array([schedule.sigma2(t) for t in ts])
        dt = schedule.dt
        self.times = ts
        self.a = 1.0 + beta * dt * (1.0 - c / s2)
        self.b = np.sqrt(2.0 * beta * dt)
        self.forcing_scale = beta * dt

    def final_variance(self):
        """Per-coordinate variance of the final state, y_0 ~ N(0, 1)."""
        v = 1.0
        for a_n, b_n in zip(self.a, self.b):
            v = a_n * a_n * v + b_n * b_n
        return v

    def exponent(self):
        """All Lyapunov exponents coincide: mean log |a_n| per unit time."""
        tau = self.schedule.n_steps * self.schedule.dt
        return float(np.sum(np.log(np.abs(self.a))) / tau)

    def zeta_final(self, chi_vec):
        """First-order response to a constant score error chi."""
        chi_vec = np.asarray(chi_vec, dtype=float)
        n = len(self.a)
        # sum_n (prod_{m>n} a_m) * beta_n dt * chi  via suffix products
        suffix = np.ones(n)
        suffix[:-1] = np.cumprod(self.a[::-1])[:-1][::-1]
        return float(np.sum(suffix * self.forcing_scale)) * chi_vec

    def replay(self, y0, xi, eps=0.0, chi=None):
        """Unroll the linear recursion for given noise draws."""
        y = np.array(y0, dtype=float)
        for n in range(len(self.a)):
            y = self.a[n] * y + self.b[n] * xi[n]
            if eps != 0.0 and chi is not None:
                y = y + eps * self.forcing_scale[n] * np.asarray(chi)
        return y
