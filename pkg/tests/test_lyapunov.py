import numpy as np
import pytest

from helpers import LinearOracle, make_model
from scoreflow.dynamics import (
    DegenerateTangentError,
    PerturbationSpec,
    RecordFlags,
    _sign_fixed_qr,
    run_paths,
    simulate,
)
from scoreflow.lyapunov import (
    CauchyGreenOverflowError,
    cauchy_green_top,
    ftle,
    inhomogeneous_response,
    init_frame,
    qr_push,
)


class TestInitFrame:
    def test_orthonormal(self):
        e = init_frame(2, 2, seed=0)
        assert np.max(np.abs(e.T @ e - np.eye(2))) < 1e-14

    def test_reproducible(self):
        assert np.array_equal(init_frame(4, 3, seed=5), init_frame(4, 3, seed=5))

    def test_full_frame_determinant(self):
        e = init_frame(6, 6, seed=1)
        assert abs(abs(np.linalg.det(e)) - 1.0) < 1e-12

    def test_bad_k(self):
        with pytest.raises(ValueError):
            init_frame(3, 4, seed=0)


class TestQrPush:
    def test_identity(self):
        e = init_frame(3, 2, seed=2)
        e2, r, rf = qr_push(e, np.eye(3))
        assert np.allclose(e2, e, atol=1e-14)
        assert np.allclose(r, 1.0, atol=1e-14)

    def test_scaling(self):
        e = init_frame(2, 2, seed=3)
        e2, r, _ = qr_push(e, 2.0 * np.eye(2))
        assert np.allclose(e2, e, atol=1e-14)
        assert np.allclose(r, [2.0, 2.0], atol=1e-14)

    def test_diagonal_action_column_order(self):
        jac = np.diag([3.0, 1.0])
        e2, r, _ = qr_push(np.eye(2), jac)
        assert np.allclose(r, [3.0, 1.0])
        assert np.allclose(e2, np.eye(2))
        swapped = np.eye(2)[:, ::-1]
        e2, r, _ = qr_push(swapped, jac)
        assert np.allclose(r, [1.0, 3.0])

    def test_upper_triangular_and_positive(self):
        rng = np.random.default_rng(0)
        e = init_frame(4, 3, seed=4)
        jac = rng.normal(size=(4, 4))
        e2, r, rf = qr_push(e, jac)
        assert np.allclose(jac @ e, e2 @ rf, atol=1e-12)
        assert np.all(np.diag(rf) > 0)
        assert np.allclose(rf, np.triu(rf), atol=1e-14)
        assert np.max(np.abs(e2.T @ e2 - np.eye(3))) < 1e-12

    def test_degenerate(self):
        with pytest.raises(DegenerateTangentError):
            qr_push(np.eye(2), np.zeros((2, 2)))


class TestFtle:
    def test_point_mass_matches_linear_oracle(self):
        model = make_model(target="point", target_params={"location": (0.0, 0.0)},
                           n_steps=400)
        oracle = LinearOracle(model.schedule)
        bundles = simulate(model, "sde", n_paths=2, seed=0, tangent_k=2)
        for b in bundles:
            rep = ftle(b)
            assert np.allclose(rep.exponents, oracle.exponent(), rtol=1e-10)
            assert rep.exponents[0] >= rep.exponents[1]
            # invariant: exponents reproduce exactly from the stored history
            assert np.array_equal(rep.raw_sums, rep.log_r_history.sum(axis=0))
            assert np.allclose(rep.raw_sums / rep.tau_eff, rep.exponents)

    def test_two_moons_normal_superstability(self):
        model = make_model(n_steps=500)
        b = simulate(model, "sde", n_paths=1, seed=1, tangent_k=2)[0]
        rep = ftle(b)
        assert rep.exponents[0] > rep.exponents[1]
        assert rep.exponents[1] < -5.0

    def test_short_horizon_matches_jacobian_product_svd(self):
        # direct-product oracle: push the product's right singular frame
        # through the QR cocycle; the cumulative R diagonal then equals the
        # singular values exactly
        model = make_model(n_steps=50)
        b = simulate(model, "sde", n_paths=1, seed=2, tangent_k=2,
                     record=RecordFlags(jacobians=True))[0]
        prod = np.eye(2)
        for jac in b.jacobians:
            prod = jac @ prod
        u, sv, vt = np.linalg.svd(prod)
        frame = vt.T
        logs = np.zeros(2)
        for jac in b.jacobians:
            frame, r, _ = qr_push(frame, jac)
            logs += np.log(r)
        lam_qr = np.sort(logs / b.tau_eff)[::-1]
        lam_sv = np.log(sv) / b.tau_eff
        assert np.max(np.abs(lam_qr - lam_sv)) < 1e-6

    def test_volume_identity(self):
        model = make_model(n_steps=100)
        b = simulate(model, "sde", n_paths=1, seed=3, tangent_k=2,
                     record=RecordFlags(jacobians=True))[0]
        rep = ftle(b)
        logdet = sum(np.log(abs(np.linalg.det(jac))) for jac in b.jacobians)
        assert abs(rep.exponents.sum() * rep.tau_eff - logdet) < 1e-8

    def test_monotone_nesting(self):
        model = make_model(n_steps=200)
        b1 = simulate(model, "sde", n_paths=1, seed=4, tangent_k=1)[0]
        b2 = simulate(model, "sde", n_paths=1, seed=4, tangent_k=2)[0]
        # identical substreams draw different frame shapes, so compare the
        # cocycle itself on the recorded first column: QR nesting makes the
        # k=1 log-stretch history equal the first column of the k=2 history
        # only when the initial frames share the first column; rebuild both
        # from one frame
        model_r = make_model(n_steps=200)
        br = simulate(model_r, "sde", n_paths=1, seed=4, tangent_k=2,
                      record=RecordFlags(jacobians=True))[0]
        e0 = init_frame(2, 2, seed=17)
        f1 = e0[:, :1].copy()
        f2 = e0.copy()
        l1 = np.zeros(1)
        l2 = np.zeros(2)
        for jac in br.jacobians:
            f1, r1, _ = qr_push(f1, jac)
            f2, r2, _ = qr_push(f2, jac)
            l1 += np.log(r1)
            l2 += np.log(r2)
        assert abs(l1[0] - l2[0]) < 1e-10
        assert b1.log_r.shape[1] == 1 and b2.log_r.shape[1] == 2

    def test_sign_convention(self):
        model = make_model(n_steps=120)
        b = simulate(model, "sde", n_paths=1, seed=5, tangent_k=2)[0]
        assert np.all(np.isfinite(b.log_r))  # log of positive r values

    def test_frame_seed_subspace_convergence(self):
        # The QR cocycle's frame converges to the backward Lyapunov frame
        # regardless of initialization, so the final top direction agrees
        # across frame seeds.  (The exponent itself keeps an initial-angle
        # offset log|cos theta|/tau_eff at fixed horizon -- see the
        # decisions ledger -- so the subspace, not lambda_1, is asserted.)
        model = make_model(n_steps=500)
        b = simulate(model, "sde", n_paths=1, seed=6, tangent_k=2,
                     record=RecordFlags(jacobians=True))[0]
        tops = []
        for seed in (100, 200):
            frame = init_frame(2, 2, seed=seed)
            for jac in b.jacobians:
                frame, _, _ = qr_push(frame, jac)
            tops.append(frame[:, 0])
        cos = abs(tops[0] @ tops[1])
        assert cos > 1.0 - 1e-6

    def test_missing_history(self):
        model = make_model(n_steps=50)
        b = simulate(model, "sde", n_paths=1, seed=0)[0]
        with pytest.raises(ValueError):
            ftle(b)


class TestCauchyGreen:
    def test_single_step_scaling(self):
        model = make_model(n_steps=50)
        b = simulate(model, "sde", n_paths=1, seed=1,
                     record=RecordFlags(jacobians=True))[0]
        b.jacobians[0] = 2.0 * np.eye(2)
        vals, vecs = cauchy_green_top(b, 2, start=0, stop=1)
        assert np.allclose(vals, 4.0)

    def test_point_mass_matches_ftle(self):
        model = make_model(target="point", target_params={"location": (0.0, 0.0)},
                           n_steps=50)
        b = simulate(model, "sde", n_paths=1, seed=2, tangent_k=2,
                     record=RecordFlags(jacobians=True))[0]
        rep = ftle(b)
        vals, _ = cauchy_green_top(b, 2)
        lam_cg = np.log(vals) / (2.0 * rep.tau_eff)
        assert np.max(np.abs(np.sort(lam_cg)[::-1] - rep.exponents)) < 1e-8

    def test_tail_window_vector_agrees_with_frame(self):
        model = make_model(n_steps=300)
        b = simulate(model, "sde", n_paths=1, seed=3, tangent_k=2,
                     record=RecordFlags(jacobians=True))[0]
        rep = ftle(b)
        _, vecs = cauchy_green_top(b, 1, start=250, stop=300)
        cos = abs(vecs[:, 0] @ rep.final_frame[:, 0])
        assert np.degrees(np.arccos(min(cos, 1.0))) < 5.0

    def test_long_window_refused(self):
        model = make_model(n_steps=300)
        b = simulate(model, "sde", n_paths=1, seed=4,
                     record=RecordFlags(jacobians=True))[0]
        with pytest.raises(CauchyGreenOverflowError):
            cauchy_green_top(b, 2)


class TestInhomogeneousResponse:
    def test_zero_field(self):
        model = make_model(n_steps=100)
        chi = PerturbationSpec.constant((1.0, 0.0), sup_norm=0.0)
        b = simulate(model, "sde", n_paths=1, seed=0,
                     record=RecordFlags(states=True, jacobians=True))[0]
        hist, zeta = inhomogeneous_response(b, chi)
        assert np.all(hist == 0.0)
        assert np.all(zeta == 0.0)

    def test_point_mass_constant_field_closed_form(self):
        model = make_model(target="point", target_params={"location": (0.0, 0.0)},
                           n_steps=300)
        oracle = LinearOracle(model.schedule)
        chi = PerturbationSpec.constant((1.0, 0.0), sup_norm=1.0)
        b = simulate(model, "sde", n_paths=1, seed=1,
                     record=RecordFlags(states=True, jacobians=True))[0]
        _, zeta = inhomogeneous_response(b, chi)
        expected = oracle.zeta_final([1.0, 0.0])
        assert np.allclose(zeta, expected, rtol=1e-10, atol=1e-14)

    def test_two_moons_coupled_simulation(self):
        pert = PerturbationSpec.random_fourier(2, seed=21, sup_norm=1.0)
        base = make_model(n_steps=250)
        b = simulate(base, "sde", n_paths=1, seed=12,
                     record=RecordFlags(states=True, jacobians=True))[0]
        _, zeta = inhomogeneous_response(b, pert)
        eps = 1e-4
        pm = make_model(n_steps=250, perturbation=pert, eps=eps)
        yp = run_paths(pm, "sde", n_paths=1, seed=12).final_states[0]
        delta = yp - b.final_state
        assert np.linalg.norm(delta - eps * zeta) < 0.1 * eps * np.linalg.norm(zeta)

    def test_batched_zeta_matches_bundle_recursion(self):
        pert = PerturbationSpec.random_fourier(2, seed=30, sup_norm=1.0)
        model = make_model(n_steps=150)
        res = run_paths(model, "sde", n_paths=3, seed=8, response_field=pert)
        bundles = simulate(model, "sde", n_paths=3, seed=8,
                           record=RecordFlags(states=True, jacobians=True))
        for j, b in enumerate(bundles):
            _, zeta = inhomogeneous_response(b, pert)
            assert np.allclose(zeta, res.zeta_final[j], rtol=1e-12)

    def test_missing_history(self):
        model = make_model(n_steps=50)
        chi = PerturbationSpec.constant((1.0, 0.0))
        b = simulate(model, "sde", n_paths=1, seed=0)[0]
        with pytest.raises(ValueError):
            inhomogeneous_response(b, chi)
