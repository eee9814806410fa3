"""Reverse-process integration and pathwise derivative bookkeeping.

Integrates the reverse SDE (Euler-Maruyama) or the probability-flow /
flow-matching ODE with a fixed step, optionally applying a deterministic
drift perturbation, and propagates step Jacobians, orthonormal tangent
frames (QR pushes) and the inhomogeneous response vector along each path.

Every path owns a counter-based RNG substream keyed by (seed, path index),
so batch results are independent of chunking, scheduling and worker count.
Draw order per path: initial state, then the tangent frame (if tracked),
then the full noise block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .schedule_score import (
    DriftModel,
    _drift_batch,
    _drift_hessian_batch,
    _drift_jacobian_batch,
    default_mode,
)

DIVERGENCE_THRESHOLD = 1e6

# reference box for perturbation sup-norm normalization
REFERENCE_BOX = 3.0
REFERENCE_GRID = 64


class DivergenceError(RuntimeError):
    """State left the finite integration regime."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"path diverged at step {step}")


class PerturbationSpec:
    """Deterministic drift-error field chi_t(x) with controlled sup-norm.

    Fields are frozen at construction (same seed, same field) and
    continuous in x and t.  The amplitude is rescaled so that the max of
    |chi| over a 64x64 grid on the reference box [-3, 3]^2 (lifted into
    ambient coordinates when a lift is supplied) equals ``sup_norm``.
    An optional time window multiplies by a smooth bump supported on
    [t_a, t_b]; the default field is time-constant.
    """

    def __init__(self, kind, sup_norm, ambient_dim, time_window=None):
        self.kind = kind
        self.sup_norm = float(sup_norm)
        self.ambient_dim = int(ambient_dim)
        self.time_window = tuple(time_window) if time_window else None
        if self.sup_norm < 0:
            raise ValueError("sup_norm must be nonnegative")

    # -- constructors ----------------------------------------------------

    @classmethod
    def constant(cls, direction, sup_norm=1.0, time_window=None):
        """Constant vector field of magnitude sup_norm along ``direction``."""
        v = np.asarray(direction, dtype=float)
        n = np.linalg.norm(v)
        if n == 0:
            raise ValueError("direction must be nonzero")
        spec = cls("constant_vector", sup_norm, len(v), time_window)
        spec.direction = v / n * spec.sup_norm
        return spec

    @classmethod
    def random_fourier(cls, ambient_dim, n_features=64, length_scale=1.0,
                       seed=0, sup_norm=1.0, lift=None, time_window=None):
        """Random Fourier field: per component a sum of n_features cosines
        with frequencies ~ N(0, length_scale^-2 I).

        ``lift`` is a (D, 2) matrix mapping the reference plane into the
        ambient space for D > 2 (lifted dims held at their affine values).
        """
        if n_features < 1 or length_scale <= 0:
            raise ValueError("need n_features >= 1 and length_scale > 0")
        spec = cls("random_fourier_field", sup_norm, ambient_dim, time_window)
        # distinct entropy stream from the path substreams
        g = np.random.Generator(np.random.Philox(
            np.random.SeedSequence((0x0F1E1D, seed, ambient_dim))))
        d = ambient_dim
        spec.n_features = int(n_features)
        spec.length_scale = float(length_scale)
        spec.field_seed = seed
        spec.amps = g.standard_normal((d, n_features)) / math.sqrt(n_features)
        spec.omegas = g.standard_normal((d, n_features, d)) / length_scale
        spec.phases = g.random((d, n_features)) * 2.0 * math.pi
        spec._scale = 1.0
        ref = spec._reference_points(lift)
        peak = np.max(np.linalg.norm(spec._raw(ref), axis=1))
        if peak == 0:
            raise ValueError("degenerate zero field")
        spec._scale = spec.sup_norm / peak
        return spec

    def _reference_points(self, lift):
        g = np.linspace(-REFERENCE_BOX, REFERENCE_BOX, REFERENCE_GRID)
        xx, yy = np.meshgrid(g, g)
        plane = np.column_stack([xx.ravel(), yy.ravel()])
        if self.ambient_dim == 2:
            return plane
        if lift is None:
            raise ValueError(
                "lifted targets need the manifold lift to normalize chi")
        return plane @ np.asarray(lift).T

    # -- evaluation -------------------------------------------------------

    def _bump(self, t):
        if self.time_window is None:
            return 1.0
        ta, tb = self.time_window
        if not ta < tb:
            raise ValueError("time window must satisfy t_a < t_b")
        if t <= ta or t >= tb:
            return 0.0
        return math.sin(math.pi * (t - ta) / (tb - ta)) ** 2

    def _raw(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "constant_vector":
            return np.broadcast_to(self.direction, x.shape).copy()
        phase = np.einsum("dfk,bk->bdf", self.omegas, x) + self.phases[None]
        return self._scale * np.einsum("df,bdf->bd", self.amps, np.cos(phase))

    def evaluate(self, t, x):
        """chi_t(x) for a batch of states, (B, D)."""
        return self._bump(t) * self._raw(x)

    def jacobian(self, t, x):
        """d chi_i / d x_j, (B, D, D).  Zero for constant fields."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        b = x.shape[0]
        d = self.ambient_dim
        if self.kind == "constant_vector":
            return np.zeros((b, d, d))
        phase = np.einsum("dfk,bk->bdf", self.omegas, x) + self.phases[None]
        sin = np.sin(phase)
        out = -self._scale * np.einsum("df,bdf,dfj->bdj", self.amps, sin,
                                       self.omegas)
        return self._bump(t) * out

    def hessian(self, t, x):
        """d^2 chi_i / dx_j dx_k, (B, D, D, D)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        b = x.shape[0]
        d = self.ambient_dim
        if self.kind == "constant_vector":
            return np.zeros((b, d, d, d))
        phase = np.einsum("dfk,bk->bdf", self.omegas, x) + self.phases[None]
        cos = np.cos(phase)
        out = -self._scale * np.einsum("df,bdf,dfj,dfk->bdjk", self.amps, cos,
                                       self.omegas, self.omegas)
        return self._bump(t) * out


@dataclass
class RecordFlags:
    states: bool = False
    noise: bool = False
    jacobians: bool = False
    frames: bool = False


@dataclass
class TrajectoryBundle:
    """One sample path with whatever histories were requested."""

    seed: object
    path_index: int
    integrator: str
    final_state: np.ndarray
    diverged: bool
    diverged_step: Optional[int]
    times: np.ndarray            # forward-time labels of the states
    step_times: np.ndarray       # drift evaluation times per step
    forcing_scale: np.ndarray    # dt * beta_n (score kinds) or dt (cfm)
    tau_eff: float
    states: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None
    jacobians: Optional[np.ndarray] = None
    frames: Optional[np.ndarray] = None
    log_r: Optional[np.ndarray] = None
    final_frame: Optional[np.ndarray] = None
    zeta_final: Optional[np.ndarray] = None


def _path_generator(seed, index):
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence((seed, index))))


def em_step(y, n, xi, model: DriftModel, mode="sde"):
    """One Euler-Maruyama step of the reverse SDE.

    y' = y + beta (y + 2 s [+ eps chi]) dt + xi sqrt(2 beta dt);
    deterministic given (y, n, xi).
    """
    if model.kind == "cfm":
        raise ValueError("flow-matching models integrate with ode_step")
    y = np.asarray(y, dtype=float)
    xi = np.asarray(xi, dtype=float)
    out = _em_step_batch(y[None], n, xi[None], model)[0]
    _check_finite(out, n)
    return out


def _em_step_batch(y, n, xi, model):
    t = model.step_time(n)
    dt = model.schedule.dt
    b = model.schedule.beta(t)
    return (y + _drift_batch(y, n, model, "sde") * dt
            + xi * math.sqrt(2.0 * b * dt))


def ode_step(y, n, model: DriftModel):
    """One explicit-Euler step of the probability-flow / CFM ODE."""
    y = np.asarray(y, dtype=float)
    out = y + _drift_batch(y[None], n, model, "ode")[0] * model.dt
    _check_finite(out, n)
    return out


def _check_finite(y, n):
    if not np.all(np.isfinite(y)) or np.linalg.norm(y) > DIVERGENCE_THRESHOLD:
        raise DivergenceError(n)


def step_jacobian(y, n, model: DriftModel, mode=None):
    """Jacobian of the step map: I + dt * (drift Jacobian).

    For score kinds this is I + dt beta (I + c grad s + eps grad chi) with
    c = 2 in SDE mode and 1 in ODE mode.  Additive noise leaves it
    noise-independent.
    """
    y = np.asarray(y, dtype=float)
    mode = mode or default_mode(model)
    jac = _drift_jacobian_batch(y[None], n, model, mode)[0] * model.dt
    return np.eye(len(y)) + jac


def _step_jacobian_batch(y, n, model, mode):
    jac = _drift_jacobian_batch(y, n, model, mode) * model.dt
    d = y.shape[1]
    idx = np.arange(d)
    jac[:, idx, idx] += 1.0
    return jac


def step_hessian(y, n, model: DriftModel, mode=None):
    """Second derivative of the step map, dt * (drift Hessian);
    symmetric in the two derivative indices."""
    y = np.asarray(y, dtype=float)
    mode = mode or default_mode(model)
    return _drift_hessian_batch(y[None], n, model, mode)[0] * model.dt


@dataclass
class BatchResult:
    """Array-of-paths view used by the analysis layer."""

    seed: object
    indices: np.ndarray
    integrator: str
    final_states: np.ndarray
    diverged: np.ndarray
    diverged_step: np.ndarray
    times: np.ndarray
    step_times: np.ndarray
    forcing_scale: np.ndarray
    tau_eff: float
    log_r: Optional[np.ndarray] = None       # (B, n_steps, k)
    final_frames: Optional[np.ndarray] = None
    zeta_final: Optional[np.ndarray] = None
    states: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None
    jacobians: Optional[np.ndarray] = None
    frames: Optional[np.ndarray] = None


def _sign_fixed_qr(a):
    q, r = np.linalg.qr(a)
    diag = np.diagonal(r, axis1=-2, axis2=-1)
    sign = np.where(diag < 0, -1.0, 1.0)
    q = q * sign[..., None, :]
    r = r * sign[..., :, None]
    return q, r


def run_batch(model: DriftModel, integrator, indices, seed,
              tangent_k=None, record: RecordFlags | None = None,
              response_field: PerturbationSpec | None = None,
              observer: Callable | None = None) -> BatchResult:
    """Integrate one batch of paths (vectorized across the batch).

    ``observer(n, t, y_pre, jac, frame_pre, r_full, active)`` is called per
    step when given, with the pre-push frame and the full k x k R factor
    (None unless tangent tracking is on); used by the diagnostics layer.
    """
    record = record or RecordFlags()
    indices = np.asarray(indices, dtype=np.int64)
    b = len(indices)
    d = model.ambient_dim
    n_steps = model.n_steps
    dt = model.dt
    mode = _integrator_mode(model, integrator)

    step_times = np.array([model.step_time(n) for n in range(n_steps)])
    if model.kind == "cfm":
        forcing_scale = np.full(n_steps, dt)
        times = np.concatenate([[0.0], step_times + dt])
    else:
        forcing_scale = dt * np.array(
            [model.schedule.beta(t) for t in step_times])
        times = model.schedule.horizon - dt * np.arange(n_steps + 1)

    y = np.empty((b, d))
    frames = None
    noise = None
    if tangent_k is not None:
        if not 1 <= tangent_k <= d:
            raise ValueError("tangent frame dimension must lie in [1, D]")
        frames = np.empty((b, d, tangent_k))
    for j, idx in enumerate(indices):
        g = _path_generator(seed, int(idx))
        y[j] = g.standard_normal(d)
        if tangent_k is not None:
            q, _ = _sign_fixed_qr(g.standard_normal((d, tangent_k)))
            frames[j] = q
    if integrator == "sde":
        noise = np.empty((b, n_steps, d))
        for j, idx in enumerate(indices):
            g = _path_generator(seed, int(idx))
            g.standard_normal(d)
            if tangent_k is not None:
                g.standard_normal((d, tangent_k))
            noise[j] = g.standard_normal((n_steps, d))

    need_jac = (tangent_k is not None or record.jacobians
                or response_field is not None or observer is not None)
    diverged = np.zeros(b, dtype=bool)
    diverged_step = np.full(b, -1, dtype=np.int64)
    log_r = np.zeros((b, n_steps, tangent_k)) if tangent_k else None
    zeta = np.zeros((b, d)) if response_field is not None else None
    states_h = np.empty((b, n_steps + 1, d)) if record.states else None
    jac_h = np.empty((b, n_steps, d, d)) if record.jacobians else None
    frames_h = (np.empty((b, n_steps + 1, d, tangent_k))
                if record.frames and tangent_k else None)
    if states_h is not None:
        states_h[:, 0] = y
    if frames_h is not None:
        frames_h[:, 0] = frames

    eye = np.eye(d)
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        for n in range(n_steps):
            active = ~diverged
            y_eval = np.where(active[:, None], y, 0.0)
            jac = None
            if need_jac:
                jac = _step_jacobian_batch(y_eval, n, model, mode)
            if response_field is not None:
                chi = response_field.evaluate(step_times[n], y_eval)
                zeta = (np.einsum("bij,bj->bi", jac, zeta)
                        + forcing_scale[n] * chi)
            frame_pre = None
            r_full = None
            if tangent_k is not None:
                frame_pre = frames
                # einsum, not @: bitwise independent of the batch shape
                q, r_full = _sign_fixed_qr(
                    np.einsum("bij,bjk->bik", jac, frames))
                r_diag = np.abs(np.diagonal(r_full, axis1=-2, axis2=-1))
                if np.any(r_diag[active] < 1e-14):
                    bad = int(np.argmax(
                        np.any(r_diag < 1e-14, axis=1) & active))
                    raise DegenerateTangentError(
                        f"tangent frame collapsed on path {indices[bad]} "
                        f"at step {n}")
                frames = np.where(active[:, None, None], q, frames)
                log_r[active, n, :] = np.log(r_diag[active])
            drift = _drift_batch(y_eval, n, model, mode)
            y_new = y_eval + drift * dt
            if integrator == "sde":
                t = step_times[n]
                y_new = y_new + noise[:, n] * math.sqrt(
                    2.0 * model.schedule.beta(t) * dt)
            bad = ~np.isfinite(y_new).all(axis=1) | (
                np.linalg.norm(np.nan_to_num(y_new), axis=1)
                > DIVERGENCE_THRESHOLD)
            newly = bad & active
            diverged_step[newly] = n
            diverged |= newly
            y = np.where((~diverged)[:, None], y_new, y)
            if observer is not None:
                observer(n, step_times[n], y_eval, jac, frame_pre, r_full,
                         active)
            if states_h is not None:
                states_h[:, n + 1] = y
            if jac_h is not None:
                jac_h[:, n] = jac
            if frames_h is not None:
                frames_h[:, n + 1] = frames

    return BatchResult(
        seed=seed, indices=indices, integrator=integrator,
        final_states=y, diverged=diverged, diverged_step=diverged_step,
        times=times, step_times=step_times, forcing_scale=forcing_scale,
        tau_eff=n_steps * dt, log_r=log_r, final_frames=frames,
        zeta_final=zeta, states=states_h,
        noise=noise if record.noise else None, jacobians=jac_h,
        frames=frames_h)


def _integrator_mode(model, integrator):
    if integrator not in ("sde", "ode"):
        raise ValueError(f"unknown integrator {integrator!r}")
    if integrator == "sde" and model.kind != "sgm_reverse":
        raise ValueError(
            f"integrator 'sde' requires the sgm_reverse drift, got {model.kind}")
    return integrator


def _chunk_indices(n_paths, chunk_size):
    return [np.arange(lo, min(lo + chunk_size, n_paths))
            for lo in range(0, n_paths, chunk_size)]


def run_paths(model, integrator="sde", n_paths=1, seed=0, tangent_k=None,
              record=None, response_field=None, chunk_size=2048,
              parallel_map=None, observer=None) -> BatchResult:
    """Chunked driver around run_batch; chunk layout is fixed by
    chunk_size, so results are identical for any parallel_map."""
    chunks = _chunk_indices(n_paths, chunk_size)
    if len(chunks) == 1 or observer is not None:
        # observers need a single pass in path order
        results = [run_batch(model, integrator, idx, seed, tangent_k, record,
                             response_field, observer)
                   for idx in chunks]
    else:
        runner = _ChunkRunner(model, integrator, seed, tangent_k, record,
                              response_field)
        mapper = parallel_map or (lambda f, xs: [f(x) for x in xs])
        results = list(mapper(runner, chunks))
    return _merge_results(results)


class _ChunkRunner:
    """Picklable chunk worker for process pools."""

    def __init__(self, model, integrator, seed, tangent_k, record,
                 response_field):
        self.model = model
        self.integrator = integrator
        self.seed = seed
        self.tangent_k = tangent_k
        self.record = record
        self.response_field = response_field

    def __call__(self, indices):
        return run_batch(self.model, self.integrator, indices, self.seed,
                         self.tangent_k, self.record, self.response_field)


def _merge_results(results):
    if len(results) == 1:
        return results[0]
    first = results[0]

    def cat(name):
        parts = [getattr(r, name) for r in results]
        return None if parts[0] is None else np.concatenate(parts)

    return BatchResult(
        seed=first.seed,
        indices=np.concatenate([r.indices for r in results]),
        integrator=first.integrator,
        final_states=cat("final_states"), diverged=cat("diverged"),
        diverged_step=cat("diverged_step"), times=first.times,
        step_times=first.step_times, forcing_scale=first.forcing_scale,
        tau_eff=first.tau_eff, log_r=cat("log_r"),
        final_frames=cat("final_frames"), zeta_final=cat("zeta_final"),
        states=cat("states"), noise=cat("noise"), jacobians=cat("jacobians"),
        frames=cat("frames"))


def simulate(model, integrator="sde", n_paths=1, seed=0, tangent_k=None,
             record=None, response_field=None, chunk_size=2048,
             parallel_map=None) -> list[TrajectoryBundle]:
    """Simulate n_paths reverse paths and return per-path bundles.

    Path i draws its initial state and noise from the substream keyed by
    (seed, i); rerunning with the same arguments reproduces every state
    bitwise.  A diverged path is frozen at its last finite state and
    marked, without aborting the batch.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    res = run_paths(model, integrator, n_paths, seed, tangent_k, record,
                    response_field, chunk_size, parallel_map)
    return bundles_from_result(res)


def bundles_from_result(res: BatchResult) -> list[TrajectoryBundle]:
    out = []
    for j, idx in enumerate(res.indices):
        out.append(TrajectoryBundle(
            seed=res.seed, path_index=int(idx), integrator=res.integrator,
            final_state=res.final_states[j], diverged=bool(res.diverged[j]),
            diverged_step=(int(res.diverged_step[j])
                           if res.diverged[j] else None),
            times=res.times, step_times=res.step_times,
            forcing_scale=res.forcing_scale, tau_eff=res.tau_eff,
            states=None if res.states is None else res.states[j],
            noise=None if res.noise is None else res.noise[j],
            jacobians=None if res.jacobians is None else res.jacobians[j],
            frames=None if res.frames is None else res.frames[j],
            log_r=None if res.log_r is None else res.log_r[j],
            final_frame=(None if res.final_frames is None
                         else res.final_frames[j]),
            zeta_final=None if res.zeta_final is None else res.zeta_final[j]))
    return out


def replay(bundle: TrajectoryBundle, model: DriftModel):
    """Re-run a recorded noise sequence through ``model``.

    Returns the sequence of states; with the bundle's own model this
    reproduces the recorded path bitwise.
    """
    if bundle.noise is None:
        raise ValueError("bundle has no recorded noise")
    g = _path_generator(bundle.seed, bundle.path_index)
    y = g.standard_normal(model.ambient_dim)
    ys = [y]
    for n in range(model.n_steps):
        y = _em_step_batch(y[None], n, bundle.noise[n][None], model)[0]
        ys.append(y)
    return np.array(ys)


class DegenerateTangentError(RuntimeError):
    """QR push hit a numerically rank-deficient tangent image."""
