import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hjbac.autodiff import ContractViolation
from hjbac.problems import (BallDomain, SigmaBoundError, hamiltonian, make_eikonal, make_lqr,
                            make_nonconstant_lqr, make_problem, make_van_der_pol, pde_residual,
                            sample_boundary, sample_initial)


def interior_points(dim, n, seed, r_lo=0.0, r_hi=0.9):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return z * rng.uniform(r_lo, r_hi, size=(n, 1))


def all_problems():
    return [make_lqr(5), make_van_der_pol(4), make_eikonal(5), make_nonconstant_lqr(5)]


class TestLQR:
    def test_gain(self):
        # p = q = beta = gamma = 1 gives the golden-ratio conjugate
        assert make_lqr(5).k == pytest.approx((np.sqrt(5) - 1) / 2, abs=1e-10)
        assert make_lqr(5).k == pytest.approx(0.6180339887, abs=1e-10)

    def test_origin(self):
        pb = make_lqr(5)
        zero = np.zeros((1, 5))
        assert pb.exact_value(zero)[0] == 0.0
        np.testing.assert_array_equal(pb.exact_control(zero), 0.0)

    def test_control_on_axis(self):
        u = make_lqr(5).exact_control(np.eye(5)[:1])
        np.testing.assert_allclose(u, [[-0.618034, 0, 0, 0, 0]], atol=1e-6)

    def test_zero_fields_leave_only_running_cost(self):
        pb = make_lqr(3)
        x = interior_points(3, 20, 0)
        res = pde_residual(pb, lambda y: np.zeros(len(y)), lambda y: np.zeros_like(y), x)
        np.testing.assert_allclose(res, np.sum(x**2, axis=1) - 2 * pb.k * 3, atol=1e-12)

    def test_coefficients(self):
        pb = make_lqr(3, beta=2.0)
        x = interior_points(3, 4, 1)
        u = np.ones((4, 3))
        np.testing.assert_array_equal(pb.drift(x, u), 2.0 * u)
        np.testing.assert_allclose(pb.diffusion(x, u)[0], np.sqrt(2) * np.eye(3))
        np.testing.assert_allclose(pb.boundary_cost(x), pb.k)

    def test_bad_constants(self):
        with pytest.raises(ContractViolation):
            make_lqr(2, q=0.0)


class TestVanDerPol:
    def test_example_point(self):
        pb = make_van_der_pol(4, a=1.0, epsilon=0.1)
        x = np.array([[1.0, 0.0, 0.0, 0.0]])
        assert pb.exact_value(x)[0] == pytest.approx(1.0)
        u = np.array([[0.3, -0.4]])
        np.testing.assert_allclose(pb.drift(x, u), [[0.0, 0.0, -1.0 + 0.3, -0.4]])

    def test_zero_coupling(self):
        pb = make_van_der_pol(6, a=1.5, epsilon=0.0, q=2.0)
        x = interior_points(6, 10, 2)
        np.testing.assert_allclose(pb.exact_value(x), 1.5 * np.sum(x**2, axis=1))
        # minimiser of q|u|^2 + u . dV/dx_2 with dV/dx_2 = 2 a x_2
        np.testing.assert_allclose(pb.exact_control(x), -(1.5 / 2.0) * x[:, 3:])

    def test_value_matches_ring_formula(self):
        pb = make_van_der_pol(6, a=0.7, epsilon=0.3)
        x = interior_points(6, 5, 3)
        n = 3
        ref = []
        for row in x:
            x1, x2 = row[:n], row[n:]
            cross = sum(x1[i - 1] * x1[i] for i in range(n)) + sum(x2[i] * x2[(i + 1) % n] for i in range(n))
            ref.append(0.7 * row @ row - 0.3 * cross)
        np.testing.assert_allclose(pb.exact_value(x), ref, rtol=1e-13)
        np.testing.assert_allclose(pb.boundary_cost(x), ref, rtol=1e-13)

    @pytest.mark.parametrize("dim", [3, 2])
    def test_rejects_odd_or_degenerate(self, dim):
        with pytest.raises(ContractViolation):
            make_van_der_pol(dim)


class TestEikonal:
    def test_boundary_value(self):
        pb = make_eikonal(5, a2=1.2, a3=0.2, R=1.0)
        assert pb.boundary_cost(np.eye(5)[:2]) == pytest.approx([-1.0, -1.0])

    def test_constants(self):
        pb = make_eikonal(5, a2=1.2, a3=0.2)
        assert pb.epsilon == pytest.approx(1 / 12)
        assert pb.speed(np.zeros((1, 5)))[0] == pytest.approx(0.125)
        assert pb.gamma == 0.0
        assert pb.control_head == "unit-ball"
        # sigma sigma^T / 2 = eps I
        sig = pb.diffusion(np.zeros((1, 5)), np.zeros((1, 5)))[0]
        np.testing.assert_allclose(0.5 * sig @ sig.T, pb.epsilon * np.eye(5))

    def test_control_direction(self):
        u = make_eikonal(5).exact_control(0.5 * np.eye(5)[1:2])
        np.testing.assert_allclose(u, np.eye(5)[1:2])

    def test_running_cost_is_one(self):
        pb = make_eikonal(3)
        np.testing.assert_array_equal(pb.running_cost(np.zeros((4, 3)), np.ones((4, 3))), 1.0)

    def test_precondition(self):
        with pytest.raises(ContractViolation):
            make_eikonal(5, a2=0.3, a3=0.2, R=1.0)


class TestNonconstantLQR:
    def test_control_example(self):
        pb = make_nonconstant_lqr(5, q=1, beta=1, gamma=1, R=1, epsilon=-1)
        u = pb.exact_control(np.full((1, 5), 0.5))
        # (beta + 2 eps) = -1, q/k = (sqrt5 + 1)/2
        np.testing.assert_allclose(u, 0.5 / ((np.sqrt(5) + 1) / 2 + 0.5), rtol=1e-12)
        np.testing.assert_allclose(u, 0.236068, atol=1e-6)

    def test_origin(self):
        pb = make_nonconstant_lqr(4)
        zero = np.zeros((1, 4))
        np.testing.assert_allclose(pb.diffusion(zero, np.ones((1, 4)))[0], np.sqrt(2) * np.eye(4))
        np.testing.assert_array_equal(pb.exact_control(zero), 0.0)

    def test_sigma_bound_enforced(self):
        pb = make_nonconstant_lqr(2, epsilon=-1.0, u_max=1.0)
        pb.check_sigma_bound(np.array([[0.5, 0.0]]), np.array([[1.0, 0.0]]))
        with pytest.raises(SigmaBoundError):
            pb.check_sigma_bound(np.array([[0.9, 0.0]]), np.array([[-5.0, 0.0]]))

    def test_reduces_to_lqr(self):
        rng = np.random.default_rng(0)
        a, b = make_nonconstant_lqr(5, epsilon=0.0), make_lqr(5)
        x = interior_points(5, 200, 1)
        u = rng.normal(size=(200, 5))
        np.testing.assert_allclose(a.drift(x, u), b.drift(x, u), atol=1e-12)
        np.testing.assert_allclose(a.diffusion(x, u), b.diffusion(x, u), atol=1e-12)
        np.testing.assert_allclose(a.running_cost(x, u), b.running_cost(x, u), atol=1e-12)
        np.testing.assert_allclose(a.boundary_cost(x), b.boundary_cost(x), atol=1e-12)
        np.testing.assert_allclose(a.exact_value(x), b.exact_value(x), atol=1e-12)
        np.testing.assert_allclose(a.exact_control(x), b.exact_control(x), atol=1e-12)


class TestResidualOracle:
    @pytest.mark.parametrize("pb", all_problems() + [make_van_der_pol(10), make_lqr(3, p=2, q=0.5, beta=1.5, gamma=0.3)],
                             ids=lambda p: f"{p.name}{p.dim}")
    def test_exact_solutions(self, pb):
        lo = 0.1 if pb.name == "eikonal" else 0.0
        x = interior_points(pb.dim, 100, 4, r_lo=lo)
        res = pde_residual(pb, pb.exact_value, pb.exact_control, x)
        tol = 1e-4 if pb.name == "eikonal" else 1e-5
        assert np.max(np.abs(res)) < tol

    def test_rejects_points_near_boundary(self):
        pb = make_lqr(2)
        with pytest.raises(ContractViolation):
            pde_residual(pb, pb.exact_value, pb.exact_control, np.array([[0.99995, 0.0]]))

    @pytest.mark.parametrize("pb", all_problems(), ids=lambda p: p.name)
    def test_exact_control_minimises_hamiltonian(self, pb):
        rng = np.random.default_rng(5)
        lo = 0.1 if pb.name == "eikonal" else 0.0
        x = interior_points(pb.dim, 20, 6, r_lo=lo)
        grad = pb.exact_gradient(x)
        hess = np.stack([_fd_hessian(pb.exact_value, xi) for xi in x])
        u_star = pb.exact_control(x)
        base = hamiltonian(pb, x, u_star, grad, hess)
        for _ in range(50):
            delta = rng.normal(scale=0.2, size=u_star.shape)
            u = u_star + delta
            if pb.name == "eikonal":
                u /= np.maximum(1.0, np.linalg.norm(u, axis=1, keepdims=True))
            if pb.name == "nclqr":
                u = np.clip(u, -pb.u_max, pb.u_max)
            assert np.all(hamiltonian(pb, x, u, grad, hess) >= base - 1e-9)


def _fd_hessian(V, x, step=1e-4):
    d = len(x)
    H = np.zeros((d, d))
    eye = np.eye(d) * step
    for i in range(d):
        for j in range(d):
            H[i, j] = (V((x + eye[i] + eye[j])[None]) - V((x + eye[i] - eye[j])[None])
                       - V((x - eye[i] + eye[j])[None]) + V((x - eye[i] - eye[j])[None]))[0] / (4 * step**2)
    return H


class TestSampling:
    def test_boundary_on_sphere(self):
        y = sample_boundary(BallDomain(2.0), 7, 1000, np.random.default_rng(0))
        np.testing.assert_allclose(np.linalg.norm(y, axis=1), 2.0, atol=1e-12)

    def test_initial_median_radius(self):
        x = sample_initial(BallDomain(1.0), 5, 100_000, np.random.default_rng(1))
        assert np.median(np.linalg.norm(x, axis=1)) == pytest.approx(0.5 ** (1 / 5), abs=0.003)

    def test_initial_radial_ks(self):
        x = sample_initial(BallDomain(1.0), 5, 100_000, np.random.default_rng(2))
        r = np.linalg.norm(x, axis=1)
        assert stats.kstest(r, lambda t: np.clip(t, 0, 1) ** 5).statistic < 0.01

    def test_boundary_mean_symmetric(self):
        n, d = 100_000, 5
        y = sample_boundary(BallDomain(1.0), d, n, np.random.default_rng(3))
        se = np.sqrt(1.0 / d / n)  # each coordinate has variance R^2 / d
        assert np.all(np.abs(y.mean(axis=0)) < 3 * se)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 12), st.floats(0.1, 10.0), st.integers(0, 2**32 - 1))
    def test_initial_inside(self, dim, radius, seed):
        dom = BallDomain(radius)
        x = sample_initial(dom, dim, 50, np.random.default_rng(seed))
        assert np.all(dom.contains(x))
        assert np.all(dom.signed_dist(x) > 0)

    def test_signed_distance_sign(self):
        dom = BallDomain(1.0)
        d = dom.signed_dist(np.array([[0.5, 0.0], [1.0, 0.0], [0.0, 2.0]]))
        np.testing.assert_allclose(d, [0.5, 0.0, -1.0])


class TestFactory:
    def test_make_problem_filters_constants(self):
        pb = make_problem("eikonal", 3, a2=2.0, q=7.0)
        assert pb.a2 == 2.0

    def test_unknown(self):
        with pytest.raises(ContractViolation):
            make_problem("heat", 3)
