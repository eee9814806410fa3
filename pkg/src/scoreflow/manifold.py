"""Curve-supported target measures.

A target is a union of smooth parametrized arcs in the plane, optionally
lifted isometrically into R^D, carrying a probability density with respect
to arc length.  This module provides construction of the standard shapes,
nearest-point projection, exact sampling, and Gauss-Legendre quadrature
rules with log-domain weights (the posterior sums downstream underflow at
small kernel widths, so every weight is kept as a log).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

# Tabulation / projection resolution.  The coarse scan has to bracket the
# global minimum for nonconvex curves; 4096 nodes per arc is far below the
# feature scale of every supported shape.
LENGTH_GRID = 4096
SCAN_GRID = 4096
REFINE_STEPS = 40
QUAD_FLOOR = 64

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0

# Fixed entropy for the plane -> R^D lift so lifted targets are identical
# across runs and processes.
_LIFT_SEED = 1347


class ShapeParameterError(ValueError):
    """Invalid shape parameters for a curve kind."""


class AmbientDimensionError(ValueError):
    """Ambient dimension below 2."""


@dataclass(frozen=True)
class CircleArc:
    """Circular arc, angle0 -> angle1, parametrized on [0, 1]."""

    center: tuple[float, float]
    radius: float
    angle0: float = 0.0
    angle1: float = TWO_PI

    @property
    def closed(self) -> bool:
        return abs(abs(self.angle1 - self.angle0) - TWO_PI) < 1e-12

    def point(self, s):
        s = np.asarray(s, dtype=float)
        a = self.angle0 + (self.angle1 - self.angle0) * s
        return np.stack(
            [
                self.center[0] + self.radius * np.cos(a),
                self.center[1] + self.radius * np.sin(a),
            ],
            axis=-1,
        )

    def velocity(self, s):
        s = np.asarray(s, dtype=float)
        da = self.angle1 - self.angle0
        a = self.angle0 + da * s
        return np.stack(
            [
                -self.radius * da * np.sin(a),
                self.radius * da * np.cos(a),
            ],
            axis=-1,
        )


@dataclass(frozen=True)
class SegmentArc:
    """Straight segment from p0 to p1."""

    p0: tuple[float, float]
    p1: tuple[float, float]

    closed = False

    def point(self, s):
        s = np.asarray(s, dtype=float)[..., None]
        p0 = np.asarray(self.p0, dtype=float)
        p1 = np.asarray(self.p1, dtype=float)
        return p0 + s * (p1 - p0)

    def velocity(self, s):
        s = np.asarray(s, dtype=float)
        d = np.asarray(self.p1, dtype=float) - np.asarray(self.p0, dtype=float)
        return np.broadcast_to(d, s.shape + (2,)).copy()


@dataclass(frozen=True)
class SCurveArc:
    """S-shaped curve (sin t, sign(t)(cos t - 1)), t in [-3pi/2, 3pi/2].

    Unit-speed in t, so |velocity| is the constant 3*pi*scale.
    """

    scale: float = 1.0

    closed = False

    def _t(self, s):
        return 3.0 * math.pi * (np.asarray(s, dtype=float) - 0.5)

    def point(self, s):
        t = self._t(s)
        return self.scale * np.stack(
            [np.sin(t), np.sign(t) * (np.cos(t) - 1.0)], axis=-1
        )

    def velocity(self, s):
        t = self._t(s)
        dt = 3.0 * math.pi
        return self.scale * dt * np.stack(
            [np.cos(t), -np.sign(t) * np.sin(t)], axis=-1
        )


@dataclass(frozen=True)
class PointArc:
    """Degenerate arc: every parameter maps to one location.

    Stand-in for a point-mass target ("segment of length -> 0"); the
    nonvanishing-derivative invariant is deliberately waived for it.
    """

    location: tuple[float, ...]

    closed = False

    def point(self, s):
        s = np.asarray(s, dtype=float)
        p = np.asarray(self.location, dtype=float)
        return np.broadcast_to(p, s.shape + p.shape).copy()

    def velocity(self, s):
        s = np.asarray(s, dtype=float)
        return np.zeros(s.shape + (len(self.location),))


def _lift_basis(ambient_dim: int) -> np.ndarray:
    """Deterministic D x 2 matrix with orthonormal columns."""
    ss = np.random.SeedSequence((_LIFT_SEED, ambient_dim))
    g = np.random.Generator(np.random.Philox(ss))
    a = g.standard_normal((ambient_dim, 2))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


@dataclass(frozen=True)
class ProjectionResult:
    dist: float
    arc: int
    s: float
    foot: np.ndarray
    tangent: np.ndarray


class CurveManifold:
    """Union of arcs with an arc-length density, embedded in R^D.

    Immutable after construction; safe for concurrent readers.  All
    geometry tables (lengths, density CDFs, projection scan points) are
    precomputed here.
    """

    def __init__(self, arcs, ambient_dim=2, density="uniform", spec=None,
                 degenerate=False):
        if ambient_dim < 2:
            raise AmbientDimensionError(
                f"ambient_dim must be >= 2, got {ambient_dim}")
        self.arcs = list(arcs)
        self.ambient_dim = int(ambient_dim)
        self.intrinsic_dim = 1
        self.degenerate = bool(degenerate)
        self.spec = dict(spec) if spec else {}
        if ambient_dim > 2:
            self._lift = _lift_basis(ambient_dim)
        else:
            self._lift = None
        self._density_tables = self._parse_density(density)
        self._density_arg = density
        self._tabulate()

    # -- construction helpers -------------------------------------------

    def _parse_density(self, density):
        if density == "uniform":
            return None
        if not isinstance(density, (list, tuple)) or len(density) != len(self.arcs):
            raise ShapeParameterError(
                "custom density must provide one (s, q) table per arc")
        tables = []
        for tab in density:
            s = np.asarray(tab[0], dtype=float)
            q = np.asarray(tab[1], dtype=float)
            if s.ndim != 1 or s.shape != q.shape or len(s) < 2:
                raise ShapeParameterError("density table needs matching 1-d s and q")
            if np.any(np.diff(s) <= 0) or s[0] > 0 or s[-1] < 1:
                raise ShapeParameterError("density table s must increase and cover [0, 1]")
            if np.any(q < 0):
                raise ShapeParameterError("density values must be nonnegative")
            tables.append((s, q))
        return tables

    def _raw_density(self, arc_idx, s):
        s = np.asarray(s, dtype=float)
        if self._density_tables is None:
            return np.ones_like(s)
        grid, vals = self._density_tables[arc_idx]
        return np.interp(s, grid, vals)

    def _tabulate(self):
        n_arcs = len(self.arcs)
        grid = np.linspace(0.0, 1.0, LENGTH_GRID + 1)
        self._sgrid = grid
        self._speed = np.empty((n_arcs, LENGTH_GRID + 1))
        self._mass_cdf = np.empty((n_arcs, LENGTH_GRID + 1))
        self.arc_lengths = np.empty(n_arcs)
        arc_mass = np.empty(n_arcs)
        for j, arc in enumerate(self.arcs):
            v = arc.velocity(grid)
            speed = np.linalg.norm(v, axis=-1)
            if not self.degenerate and np.any(speed <= 0):
                raise ShapeParameterError(
                    f"arc {j} has vanishing derivative on [0, 1]")
            self._speed[j] = speed
            self.arc_lengths[j] = np.trapezoid(speed, grid)
            w = self._raw_density(j, grid) * speed
            cdf = np.concatenate(
                [[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(grid))])
            arc_mass[j] = cdf[-1]
            self._mass_cdf[j] = cdf
        total = arc_mass.sum()
        if self.degenerate:
            # point target: uniform over the (coincident) arcs
            self._q_norm = 1.0
            self.arc_masses = np.full(n_arcs, 1.0 / n_arcs)
            self._mass_cdf = np.tile(grid, (n_arcs, 1))
        else:
            if total <= 0:
                raise ShapeParameterError("target density has zero total mass")
            self._q_norm = 1.0 / total
            self.arc_masses = arc_mass / total
            self._mass_cdf /= arc_mass[:, None]
        # projection scan tables, in ambient coordinates
        scan_s = np.linspace(0.0, 1.0, SCAN_GRID + 1)
        self._scan_s = scan_s
        self._scan_points = np.stack(
            [self.point(j, scan_s) for j in range(n_arcs)])

    # -- geometry ---------------------------------------------------------

    def _to_ambient(self, p2):
        if self._lift is None:
            return p2
        return p2 @ self._lift.T

    def point(self, arc_idx, s):
        """Ambient-space curve point Gamma_j(s)."""
        return self._to_ambient(self.arcs[arc_idx].point(s))

    def velocity(self, arc_idx, s):
        """Ambient-space derivative Gamma_j'(s) (lift is isometric)."""
        return self._to_ambient(self.arcs[arc_idx].velocity(s))

    def density(self, arc_idx, s):
        """Normalized density q so that integral of q d(arc length) = 1."""
        return self._raw_density(arc_idx, s) * self._q_norm

    @property
    def total_length(self):
        return float(self.arc_lengths.sum())

    def arc_coordinate(self, arc_idx, s):
        """Global arc-length coordinate along the concatenated arcs."""
        offsets = np.concatenate([[0.0], np.cumsum(self.arc_lengths)[:-1]])
        return offsets[arc_idx] + np.asarray(s, dtype=float) * self.arc_lengths[arc_idx]

    # -- operations -------------------------------------------------------

    def project(self, x) -> ProjectionResult:
        """Nearest curve point to ``x``.

        Coarse scan over SCAN_GRID parameters per arc followed by
        golden-section refinement; ties broken by lowest (arc, s) in scan
        order.  Total function: never raises for finite input.
        """
        x = np.asarray(x, dtype=float)
        dist, arc, s, foot, tangent = self.project_points(x[None])
        return ProjectionResult(float(dist[0]), int(arc[0]), float(s[0]),
                                foot[0], tangent[0])

    def project_points(self, xs):
        """Vectorized projection of an (n, D) array of points."""
        xs = np.asarray(xs, dtype=float)
        n = xs.shape[0]
        n_arcs = len(self.arcs)
        # stacked scan: first occurrence of the minimum respects scan order
        flat = self._scan_points.reshape(-1, self.ambient_dim)
        best = np.empty(n, dtype=np.int64)
        step = 4096  # chunk the (n, n_arcs*(SCAN_GRID+1)) distance matrix
        for lo in range(0, n, step):
            hi = min(lo + step, n)
            d2 = (
                np.sum(xs[lo:hi] ** 2, axis=1)[:, None]
                - 2.0 * xs[lo:hi] @ flat.T
                + np.sum(flat**2, axis=1)[None, :]
            )
            # first index within roundoff of the minimum: ties break to the
            # lowest (arc, s) in scan order even under float jitter
            d2min = d2.min(axis=1, keepdims=True)
            tol = 1e-12 * np.maximum(d2min, 1e-30)
            best[lo:hi] = np.argmax(d2 <= d2min + tol, axis=1)
        arc_idx = best // (SCAN_GRID + 1)
        node_idx = best % (SCAN_GRID + 1)
        h = 1.0 / SCAN_GRID
        s0 = node_idx * h

        s_ref = np.empty(n)
        for j in range(n_arcs):
            sel = arc_idx == j
            if not np.any(sel):
                continue
            s_ref[sel] = self._refine(j, xs[sel], s0[sel], h)
        foot = np.empty((n, self.ambient_dim))
        tangent = np.zeros((n, self.ambient_dim))
        for j in range(n_arcs):
            sel = arc_idx == j
            if not np.any(sel):
                continue
            foot[sel] = self.point(j, s_ref[sel])
            if not self.degenerate:
                v = self.velocity(j, s_ref[sel])
                tangent[sel] = v / np.linalg.norm(v, axis=-1, keepdims=True)
        dist = np.linalg.norm(xs - foot, axis=-1)
        return dist, arc_idx, s_ref, foot, tangent

    def _refine(self, arc_idx, xs, s_center, h):
        """Golden-section refinement of squared distance on [s-h, s+h]."""
        closed = getattr(self.arcs[arc_idx], "closed", False)
        lo = s_center - h
        hi = s_center + h
        if not closed:
            lo = np.clip(lo, 0.0, 1.0)
            hi = np.clip(hi, 0.0, 1.0)

        def f(s):
            p = self.point(arc_idx, np.mod(s, 1.0) if closed else s)
            return np.sum((xs - p) ** 2, axis=-1)

        a, b = lo, hi
        for _ in range(REFINE_STEPS):
            c = b - _GOLDEN * (b - a)
            d = a + _GOLDEN * (b - a)
            take_left = f(c) < f(d)
            b = np.where(take_left, d, b)
            a = np.where(take_left, a, c)
        s = 0.5 * (a + b)
        return np.mod(s, 1.0) if closed else np.clip(s, 0.0, 1.0)

    def sample(self, n, rng_seed):
        """Draw n i.i.d. points from the target measure.

        Arc chosen proportional to its density mass, then the parameter by
        inverse CDF of q * |Gamma'| along the arc.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.default_rng(rng_seed)
        u_arc = rng.random(n)
        u_s = rng.random(n)
        edges = np.concatenate([[0.0], np.cumsum(self.arc_masses)])
        edges[-1] = 1.0
        arc_idx = np.searchsorted(edges, u_arc, side="right") - 1
        arc_idx = np.clip(arc_idx, 0, len(self.arcs) - 1)
        out = np.empty((n, self.ambient_dim))
        for j in range(len(self.arcs)):
            sel = arc_idx == j
            if not np.any(sel):
                continue
            s = np.interp(u_s[sel], self._mass_cdf[j], self._sgrid)
            out[sel] = self.point(j, s)
        return out


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre nodes over all arcs with normalized log weights.

    ``log_weights`` absorbs the quadrature weight, the speed |Gamma'| and
    the density q; after normalization logsumexp(log_weights) == 0.
    """

    arc_index: np.ndarray
    params: np.ndarray
    points: np.ndarray
    tangents: np.ndarray
    log_weights: np.ndarray

    @property
    def n(self) -> int:
        return len(self.params)


def build_curve(kind, params=None, ambient_dim=2, density="uniform"):
    """Construct one of the named curve targets.

    Parameters
    ----------
    kind : {"circle", "two_moons", "segment", "s_curve", "point"}
        "point" builds the degenerate point-mass target used by the
        closed-form linear oracles.
    params : dict, optional
        Shape parameters; see the per-kind defaults below.
    ambient_dim : int
        For ambient_dim > 2 the plane curve is lifted by a fixed isometric
        affine embedding.
    density : "uniform" or list of per-arc (s, q) tables
    """
    params = dict(params or {})
    if ambient_dim < 2:
        raise AmbientDimensionError(
            f"ambient_dim must be >= 2, got {ambient_dim}")

    def _take(name, default):
        return params.pop(name, default)

    degenerate = False
    if kind == "circle":
        r = float(_take("radius", 1.0))
        center = tuple(_take("center", (0.0, 0.0)))
        if r <= 0:
            raise ShapeParameterError("circle radius must be positive")
        arcs = [CircleArc(center=center, radius=r)]
    elif kind == "two_moons":
        # two half-circles, the second reflected; the standard benchmark
        r = float(_take("radius", 1.0))
        if r <= 0:
            raise ShapeParameterError("moon radius must be positive")
        c1 = tuple(_take("center1", (0.0, 0.0)))
        c2 = tuple(_take("center2", (1.0, 0.5)))
        arcs = [
            CircleArc(center=c1, radius=r, angle0=0.0, angle1=math.pi),
            CircleArc(center=c2, radius=r, angle0=math.pi, angle1=TWO_PI),
        ]
    elif kind == "segment":
        p0 = tuple(_take("p0", (0.0, 0.0)))
        p1 = tuple(_take("p1", (1.0, 0.0)))
        if np.allclose(p0, p1):
            raise ShapeParameterError(
                "segment endpoints coincide; use kind='point' for a point mass")
        arcs = [SegmentArc(p0=p0, p1=p1)]
    elif kind == "s_curve":
        scale = float(_take("scale", 1.0))
        if scale <= 0:
            raise ShapeParameterError("s_curve scale must be positive")
        arcs = [SCurveArc(scale=scale)]
    elif kind == "point":
        loc = tuple(_take("location", (0.0, 0.0)))
        if len(loc) != 2:
            raise ShapeParameterError("point location must be planar (2 coords)")
        arcs = [PointArc(location=loc)]
        degenerate = True
    else:
        raise ShapeParameterError(f"unknown curve kind {kind!r}")
    if params:
        raise ShapeParameterError(
            f"unknown parameters for kind {kind!r}: {sorted(params)}")

    spec = {"kind": kind, "params": _spec_params(kind, arcs),
            "ambient_dim": ambient_dim, "density": density}
    return CurveManifold(arcs, ambient_dim=ambient_dim, density=density,
                         spec=spec, degenerate=degenerate)


def _spec_params(kind, arcs):
    if kind == "circle":
        return {"radius": arcs[0].radius, "center": list(arcs[0].center)}
    if kind == "two_moons":
        return {"radius": arcs[0].radius, "center1": list(arcs[0].center),
                "center2": list(arcs[1].center)}
    if kind == "segment":
        return {"p0": list(arcs[0].p0), "p1": list(arcs[0].p1)}
    if kind == "s_curve":
        return {"scale": arcs[0].scale}
    if kind == "point":
        return {"location": list(arcs[0].location)}
    return {}


def point_target(location=(0.0, 0.0), ambient_dim=2):
    """Degenerate point-mass target at ``location`` (planar coordinates)."""
    return build_curve("point", {"location": tuple(location)},
                       ambient_dim=ambient_dim)


def project_to_manifold(m: CurveManifold, x) -> ProjectionResult:
    """Nearest-point projection; see CurveManifold.project."""
    return m.project(x)


def sample_target(m: CurveManifold, n: int, rng_seed) -> np.ndarray:
    """Exact i.i.d. samples from the target measure."""
    return m.sample(n, rng_seed)


def quadrature_nodes(m: CurveManifold, per_arc: int,
                     floor: int = QUAD_FLOOR) -> QuadratureRule:
    """Composite Gauss-Legendre rule with per-arc node count ``per_arc``.

    ``floor`` is the configurable minimum node count per arc; pass a
    smaller floor explicitly for coarse experimentation.
    """
    if per_arc < 2:
        raise ValueError("per_arc must be >= 2")
    if per_arc < floor:
        raise ValueError(
            f"per_arc={per_arc} below the node floor {floor}; "
            "lower `floor` explicitly if this is intended")
    x, w = np.polynomial.legendre.leggauss(per_arc)
    s = 0.5 * (x + 1.0)
    w = 0.5 * w
    arc_index = np.repeat(np.arange(len(m.arcs)), per_arc)
    params = np.tile(s, len(m.arcs))
    points = np.concatenate([m.point(j, s) for j in range(len(m.arcs))])
    tangents = np.concatenate([m.velocity(j, s) for j in range(len(m.arcs))])
    if m.degenerate:
        logw = np.full(len(params), -math.log(len(params)))
    else:
        raw = np.concatenate(
            [w * m.density(j, s) * np.linalg.norm(m.velocity(j, s), axis=-1)
             for j in range(len(m.arcs))])
        logw = np.log(raw)
        logw -= _logsumexp(logw)
    return QuadratureRule(arc_index=arc_index, params=params, points=points,
                          tangents=tangents, log_weights=logw)


def _logsumexp(a, axis=None):
    if axis is None:
        m = np.max(a)
        return m + np.log(np.sum(np.exp(a - m)))
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def curve_config(m: CurveManifold) -> dict:
    """Serializable description (kind, params, ambient_dim, density)."""
    if not m.spec:
        raise ValueError("manifold was not built by build_curve")
    cfg = {k: m.spec[k] for k in ("kind", "params", "ambient_dim")}
    d = m.spec["density"]
    cfg["density"] = d if d == "uniform" else [
        [list(np.asarray(t[0], dtype=float)), list(np.asarray(t[1], dtype=float))]
        for t in d]
    return cfg


def curve_from_config(cfg: dict) -> CurveManifold:
    """Inverse of curve_config."""
    allowed = {"kind", "params", "ambient_dim", "density"}
    unknown = set(cfg) - allowed
    if unknown:
        raise ShapeParameterError(f"unknown curve config keys: {sorted(unknown)}")
    return build_curve(
        cfg["kind"],
        cfg.get("params", {}),
        ambient_dim=cfg.get("ambient_dim", 2),
        density=cfg.get("density", "uniform"),
    )
