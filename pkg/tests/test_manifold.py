import math

import numpy as np
import pytest

from scoreflow.manifold import (
    AmbientDimensionError,
    ShapeParameterError,
    build_curve,
    curve_config,
    curve_from_config,
    point_target,
    project_to_manifold,
    quadrature_nodes,
    sample_target,
    _logsumexp,
)

TWO_PI = 2.0 * math.pi


class TestBuildCurve:
    def test_circle_length_and_density(self):
        m = build_curve("circle", {"radius": 1.0})
        assert m.total_length == pytest.approx(TWO_PI, rel=1e-10)
        s = np.linspace(0, 1, 7)
        assert np.allclose(m.density(0, s), 1.0 / TWO_PI, rtol=1e-10)

    def test_two_moons_is_two_half_circles(self):
        m = build_curve("two_moons")
        assert len(m.arcs) == 2
        assert np.allclose(m.arc_lengths, math.pi, rtol=1e-10)

    def test_unit_segment(self):
        m = build_curve("segment", {"p0": (0, 0), "p1": (1, 0)})
        assert m.total_length == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(m.density(0, [0.2, 0.9]), 1.0, rtol=1e-12)

    def test_parameter_errors(self):
        with pytest.raises(ShapeParameterError):
            build_curve("circle", {"radius": -1.0})
        with pytest.raises(ShapeParameterError):
            build_curve("segment", {"p0": (0, 0), "p1": (0, 0)})
        with pytest.raises(ShapeParameterError):
            build_curve("circle", {"radius": 1.0, "typo": 3})
        with pytest.raises(ShapeParameterError):
            build_curve("heart")

    def test_dimension_error(self):
        with pytest.raises(AmbientDimensionError):
            build_curve("circle", ambient_dim=1)

    def test_lift_isometry(self):
        flat = build_curve("two_moons")
        lifted = build_curve("two_moons", ambient_dim=10)
        s = np.linspace(0.05, 0.95, 17)
        for j in range(2):
            p2 = flat.point(j, s)
            pd = lifted.point(j, s)
            assert pd.shape == (17, 10)
            d2 = np.linalg.norm(p2[:, None] - p2[None, :], axis=-1)
            dd = np.linalg.norm(pd[:, None] - pd[None, :], axis=-1)
            assert np.max(np.abs(d2 - dd)) < 1e-12

    def test_custom_density_table(self):
        table = [[[0.0, 0.5, 1.0], [1.0, 3.0, 1.0]]]
        m = build_curve("segment", {"p0": (0, 0), "p1": (1, 0)}, density=table)
        # normalized: integral of interpolated q over unit length is 2
        assert m.density(0, 0.5) == pytest.approx(1.5, rel=1e-6)
        assert m.density(0, 0.0) == pytest.approx(0.5, rel=1e-6)


class TestProjection:
    def test_circle_radial(self):
        m = build_curve("circle", {"radius": 1.0})
        pr = project_to_manifold(m, (2.0, 0.0))
        assert pr.dist == pytest.approx(1.0, abs=1e-9)
        # foot position on a flat quadratic minimum resolves to ~sqrt(eps)
        assert np.allclose(pr.foot, [1.0, 0.0], atol=1e-7)
        assert abs(abs(pr.tangent @ np.array([0.0, 1.0])) - 1.0) < 1e-7

    def test_center_tie_breaks_to_scan_first_node(self):
        m = build_curve("circle", {"radius": 1.0})
        pr = project_to_manifold(m, (0.0, 0.0))
        assert pr.dist == pytest.approx(1.0, abs=1e-12)
        # all scan nodes equidistant; argmin keeps the first (s near 0)
        assert min(pr.s, 1.0 - pr.s) < 2.0 / 4096

    def test_on_curve_points_project_to_zero(self):
        m = build_curve("two_moons")
        # dense-scan oracle: the minimum over 10^6 parameters bounds the
        # projection distance from above
        rng = np.random.default_rng(7)
        s = rng.random(50)
        for j in (0, 1):
            pts = m.point(j, s)
            dist, _, _, _, _ = m.project_points(pts)
            assert np.max(dist) < 1e-9

    def test_matches_dense_scan_oracle(self):
        m = build_curve("two_moons")
        rng = np.random.default_rng(3)
        xs = rng.uniform(-2, 3, size=(20, 2))
        s_dense = np.linspace(0, 1, 1_000_001)
        best = np.full(len(xs), np.inf)
        for j in (0, 1):
            pts = m.point(j, s_dense)
            for i, x in enumerate(xs):
                d = np.min(np.sum((pts - x) ** 2, axis=1))
                best[i] = min(best[i], d)
        dist, _, _, _, _ = m.project_points(xs)
        assert np.allclose(dist, np.sqrt(best), atol=1e-9)

    def test_idempotence(self):
        m = build_curve("s_curve")
        rng = np.random.default_rng(11)
        xs = rng.uniform(-2, 2, size=(30, 2))
        _, _, _, foot, _ = m.project_points(xs)
        dist2, _, _, foot2, _ = m.project_points(foot)
        assert np.max(dist2) < 1e-9
        assert np.max(np.linalg.norm(foot - foot2, axis=1)) < 1e-9


class TestSampling:
    def test_circle_mean_near_center(self):
        m = build_curve("circle", {"radius": 1.0})
        xs = sample_target(m, 100_000, rng_seed=0)
        assert np.linalg.norm(xs.mean(axis=0)) < 0.02

    def test_segment_first_coordinate_mean(self):
        m = build_curve("segment", {"p0": (0, 0), "p1": (1, 0)})
        xs = sample_target(m, 100_000, rng_seed=1)
        assert abs(xs[:, 0].mean() - 0.5) < 0.005

    def test_samples_lie_on_manifold(self):
        m = build_curve("two_moons")
        xs = sample_target(m, 10_000, rng_seed=2)
        dist, _, _, _, _ = m.project_points(xs)
        assert np.max(dist) < 1e-9

    def test_sampling_quadrature_consistency(self):
        # MC mean of a smooth observable vs quadrature integral, 4 SE
        m = build_curve("two_moons")
        xs = sample_target(m, 100_000, rng_seed=3)

        def g(p):
            return np.sin(p[:, 0]) * np.cos(2.0 * p[:, 1]) + p[:, 0] ** 2

        quad = quadrature_nodes(m, 512)
        w = np.exp(quad.log_weights)
        exact = float(w @ g(quad.points))
        vals = g(xs)
        se = vals.std(ddof=1) / math.sqrt(len(vals))
        assert abs(vals.mean() - exact) < 4 * se

    def test_custom_density_shifts_mass(self):
        table = [[[0.0, 1.0], [0.0, 2.0]]]  # q linear in s: mass toward s=1
        m = build_curve("segment", {"p0": (0, 0), "p1": (1, 0)}, density=table)
        xs = sample_target(m, 100_000, rng_seed=4)
        # E[x] for q(s) = 2s on [0,1] is 2/3
        assert abs(xs[:, 0].mean() - 2.0 / 3.0) < 0.005


class TestQuadrature:
    def test_weights_normalized(self):
        m = build_curve("circle")
        q = quadrature_nodes(m, 256)
        assert abs(math.exp(_logsumexp(q.log_weights)) - 1.0) < 1e-12

    def test_flat_segment_recovers_gauss_legendre(self):
        m = build_curve("segment", {"p0": (0, 0), "p1": (1, 0)})
        q = quadrature_nodes(m, 64)
        _, w_gl = np.polynomial.legendre.leggauss(64)
        assert np.allclose(np.exp(q.log_weights), 0.5 * w_gl, rtol=1e-12)

    def test_node_floor(self):
        m = build_curve("circle")
        with pytest.raises(ValueError):
            quadrature_nodes(m, 16)
        q = quadrature_nodes(m, 16, floor=2)
        assert q.n == 16
        with pytest.raises(ValueError):
            quadrature_nodes(m, 1, floor=2)

    def test_point_target_rule(self):
        m = point_target((0.5, -0.25))
        q = quadrature_nodes(m, 2, floor=2)
        assert np.allclose(q.points, [0.5, -0.25])
        assert np.allclose(np.exp(q.log_weights), 0.5)


class TestSerialization:
    def test_roundtrip(self):
        m = build_curve("two_moons", {"radius": 1.5}, ambient_dim=4)
        cfg = curve_config(m)
        m2 = curve_from_config(cfg)
        s = np.linspace(0, 1, 9)
        for j in range(2):
            assert np.allclose(m.point(j, s), m2.point(j, s), atol=0)

    def test_unknown_key_rejected(self):
        with pytest.raises(ShapeParameterError):
            curve_from_config({"kind": "circle", "radius": 1.0})
