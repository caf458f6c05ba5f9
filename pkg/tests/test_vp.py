import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vpnet import synthdata, vp
from vpnet.errors import DivergenceError
from vpnet.hermite import SampleGrid, SampledBasis, VpParams, adaptive_hermite


def hermite_bundle(m=100, n=5, tau=50.0, lam=0.15):
    basis = adaptive_hermite(SampleGrid.uniform(m), n, VpParams(tau, lam))
    return basis, vp.pseudoinverse(basis.phi)


def fd_matrix(fn, theta, i, step=1e-6):
    plus, minus = np.array(theta, float), np.array(theta, float)
    plus[i] += step
    minus[i] -= step
    return (fn(plus) - fn(minus)) / (2 * step)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


matrices = st.integers(1, 6).flatmap(
    lambda n: st.integers(n, 12).flatmap(
        lambda m: arrays(np.float64, (m, n), elements=st.floats(-10, 10, allow_nan=False, width=64))
    )
)


class TestPseudoinverse:
    @given(matrices)
    def test_penrose_identities(self, a):
        if not np.any(a) or not np.isfinite(np.linalg.norm(a)):
            return
        b = vp.pseudoinverse(a, orthonormal_tol=None)
        p = b.pinv
        with np.errstate(over="ignore", invalid="ignore"):
            scale = max(1.0, np.linalg.norm(a) * np.linalg.norm(p))
        if not np.isfinite(scale):
            return
        tol = 1e-8 * scale**2
        assert np.linalg.norm(a @ p @ a - a) <= tol * max(1.0, np.linalg.norm(a))
        assert np.linalg.norm(p @ a @ p - p) <= tol * max(1.0, np.linalg.norm(p))
        assert np.linalg.norm((a @ p).T - a @ p) <= tol
        assert np.linalg.norm((p @ a).T - p @ a) <= tol

    def test_matches_numpy_pinv(self, rng):
        a = rng.standard_normal((20, 6))
        np.testing.assert_allclose(vp.pseudoinverse(a).pinv, np.linalg.pinv(a), atol=1e-12)

    def test_rank_deficient(self, rng):
        u = rng.standard_normal((10, 2))
        a = u @ rng.standard_normal((2, 4))
        b = vp.pseudoinverse(a)
        assert b.rank == 2
        np.testing.assert_allclose(b.pinv, np.linalg.pinv(a, rcond=1e-12), atol=1e-10)

    def test_orthonormal_fast_path(self):
        basis, b = hermite_bundle(m=200, n=4, tau=100.0, lam=0.1)
        assert b.orthonormal
        np.testing.assert_array_equal(b.pinv, basis.phi.T)
        slow = vp.pseudoinverse(basis.phi, orthonormal_tol=None)
        assert not slow.orthonormal
        np.testing.assert_allclose(b.pinv, slow.pinv, atol=1e-6)

    def test_nearly_orthonormal_uses_svd(self):
        # residual of order 1e-4 would be too far from orthonormal for the transpose shortcut
        basis = adaptive_hermite(SampleGrid.uniform(100), 3, VpParams(12.0, 0.3))
        b = vp.pseudoinverse(basis.phi)
        assert not b.orthonormal
        np.testing.assert_allclose(b.pinv @ basis.phi, np.eye(3), atol=1e-12)

    @pytest.mark.parametrize(
        "a", [np.zeros((0, 0)), np.ones(3), np.ones((2, 3)), np.array([[1.0], [np.nan]])]
    )
    def test_rejects_bad_input(self, a):
        with pytest.raises(ValueError):
            vp.pseudoinverse(a)


class TestOperators:
    def test_coefficients_recover_span(self, rng):
        basis, b = hermite_bundle()
        c = rng.standard_normal(5)
        np.testing.assert_allclose(vp.coefficients(basis.phi @ c, b), c, atol=1e-10)

    def test_batch_matches_single(self, rng):
        basis, b = hermite_bundle()
        x = rng.standard_normal((4, 100))
        np.testing.assert_allclose(vp.project(x, b), np.stack([vp.project(r, b) for r in x]), atol=1e-14)
        np.testing.assert_allclose(vp.residual_r2(x, b), [vp.residual_r2(r, b) for r in x], rtol=1e-12)

    def test_projection_idempotent(self, rng):
        _, b = hermite_bundle()
        x = rng.standard_normal(100)
        p = vp.project(x, b)
        np.testing.assert_allclose(vp.project(p, b), p, atol=1e-8)

    def test_pythagorean_identity(self, rng):
        basis, b = hermite_bundle(m=300, n=4, tau=150.0, lam=0.08)
        assert b.orthonormal
        x = rng.standard_normal(300)
        c = basis.phi.T @ x
        assert vp.residual_r2(x, b) == pytest.approx(x @ x - c @ c, abs=1e-8)

    def test_in_span_residual_is_zero(self, rng):
        basis, b = hermite_bundle()
        x = basis.phi @ rng.standard_normal(5)
        assert vp.residual_r2(x, b) < 1e-20

    def test_relative_r2_bounds_and_zero_energy(self, rng):
        _, b = hermite_bundle()
        x = np.vstack([rng.standard_normal((3, 100)), np.zeros(100)])
        r = vp.relative_r2(x, b)
        assert np.all((r[:3] >= 0) & (r[:3] <= 1))
        assert np.isnan(r[3])

    def test_length_mismatch(self):
        _, b = hermite_bundle()
        with pytest.raises(ValueError):
            vp.coefficients(np.ones(99), b)
        with pytest.raises(ValueError):
            vp.d_r2(np.ones(100), b, np.ones((100, 4)))


class TestDerivatives:
    @pytest.mark.parametrize("n,tau,lam", [(3, 40.0, 0.2), (5, 55.0, 0.12), (8, 50.0, 0.3)])
    def test_d_projection_and_d_pinv(self, n, tau, lam):
        grid = SampleGrid.uniform(100)
        basis = adaptive_hermite(grid, n, VpParams(tau, lam))
        b = vp.pseudoinverse(basis.phi)
        theta = [tau, lam]

        def proj(t):
            phi = adaptive_hermite(grid, n, t).phi
            return phi @ np.linalg.pinv(phi)

        def pinv(t):
            return np.linalg.pinv(adaptive_hermite(grid, n, t).phi)

        for i in range(2):
            assert rel_err(vp.d_projection(b, basis.dphi[i]), fd_matrix(proj, theta, i)) < 1e-5
            assert rel_err(vp.d_pinv(b, basis.dphi[i]), fd_matrix(pinv, theta, i)) < 1e-5

    def test_d_pinv_general_rectangular(self, rng):
        # not orthonormal and not from the Hermite family
        a0, da = rng.standard_normal((9, 4)), rng.standard_normal((9, 4))
        b = vp.pseudoinverse(a0)
        fd = (np.linalg.pinv(a0 + 1e-6 * da) - np.linalg.pinv(a0 - 1e-6 * da)) / 2e-6
        assert rel_err(vp.d_pinv(b, da), fd) < 1e-6
        fdp = (
            (a0 + 1e-6 * da) @ np.linalg.pinv(a0 + 1e-6 * da) - (a0 - 1e-6 * da) @ np.linalg.pinv(a0 - 1e-6 * da)
        ) / 2e-6
        assert rel_err(vp.d_projection(b, da), fdp) < 1e-6

    def test_d_projection_symmetric(self):
        basis, b = hermite_bundle()
        d = vp.d_projection(b, basis.dphi[1])
        np.testing.assert_allclose(d, d.T, atol=1e-15)

    @given(seed=st.integers(0, 2**31), n=st.sampled_from([3, 5, 8]))
    def test_d_r2(self, seed, n):
        rng = np.random.default_rng(seed)
        grid = SampleGrid.uniform(100)
        theta = [rng.uniform(40, 60), rng.uniform(0.12, 0.3)]
        basis = adaptive_hermite(grid, n, theta)
        b = vp.pseudoinverse(basis.phi)
        x = rng.standard_normal((3, 100))

        def r2(t):
            return vp.residual_r2(x, vp.pseudoinverse(adaptive_hermite(grid, n, t).phi))

        for i in range(2):
            assert rel_err(vp.d_r2(x, b, basis.dphi[i]), fd_matrix(r2, theta, i)) < 1e-5

    def test_d_r2_matches_formula(self, rng):
        basis, b = hermite_bundle()
        x = rng.standard_normal(100)
        proj = basis.phi @ b.pinv
        expected = -2 * x @ (np.eye(100) - proj) @ basis.dphi[0] @ b.pinv @ x
        assert vp.d_r2(x, b, basis.dphi[0]) == pytest.approx(expected, rel=1e-10)

    @pytest.mark.parametrize("m,n", [(50, 3), (200, 8)])
    def test_d_r2_consistent_with_d_projection(self, rng, m, n):
        basis, b = hermite_bundle(m=m, n=n, tau=m / 2, lam=20.0 / m)
        x = rng.standard_normal(m)
        for d in basis.dphi:
            assert vp.d_r2(x, b, d) == pytest.approx(-x @ vp.d_projection(b, d) @ x, abs=1e-8)

    def test_zero_derivative(self):
        basis, b = hermite_bundle()
        zero = np.zeros_like(basis.phi)
        assert not np.any(vp.d_pinv(b, zero))
        assert not np.any(vp.d_projection(b, zero))
        assert vp.d_r2(np.ones(100), b, zero) == 0

    def test_shape_mismatch(self):
        _, b = hermite_bundle()
        with pytest.raises(ValueError):
            vp.d_pinv(b, np.ones((100, 3)))


class TestVpFit:
    def builder(self, grid, n):
        return lambda p: adaptive_hermite(grid, n, p, normalize=True)

    @pytest.mark.parametrize("start", [VpParams(45.0, 0.11), VpParams(55.0, 0.13)])
    def test_synthetic_batch_near_generator_means(self, start):
        cfg = synthdata.SynthConfig(samples_per_class=100)
        train, _ = synthdata.generate(cfg)
        grid = SampleGrid.uniform(cfg.m)
        fit = vp.vp_fit(train.signals[:200], self.builder(grid, cfg.n_gen), start)
        assert fit.tau == pytest.approx(cfg.tau_mean, rel=0.1)
        assert fit.lam == pytest.approx(cfg.lambda_mean, rel=0.1)

    def test_in_span_signal_residual_decreases(self):
        grid = SampleGrid.uniform(100)
        truth = VpParams(42.0, 0.16)
        x = adaptive_hermite(grid, 4, truth).phi @ np.array([1.0, 0.4, -0.6, 0.2])
        start = VpParams(44.0, 0.15)
        fit = vp.vp_fit(x, self.builder(grid, 4), start)

        def r2(p):
            return vp.residual_r2(x, vp.pseudoinverse(self.builder(grid, 4)(p).phi))

        assert r2(fit) <= r2(start)
        assert abs(fit.tau - truth.tau) < abs(start.tau - truth.tau)

    def test_objective_does_not_increase(self, rng):
        grid = SampleGrid.uniform(100)
        x = rng.standard_normal((5, 100))
        start = VpParams(50.0, 0.12)
        fit = vp.vp_fit(x, self.builder(grid, 5), start, steps=20)

        def obj(p):
            return np.mean(vp.relative_r2(x, vp.pseudoinverse(self.builder(grid, 5)(p).phi)))

        assert obj(fit) <= obj(start)

    def test_zero_steps_returns_start(self):
        grid = SampleGrid.uniform(30)
        start = VpParams(15.0, 0.5)
        assert vp.vp_fit(np.ones(30), self.builder(grid, 2), start, steps=0) == start

    def test_zero_energy_rejected(self):
        grid = SampleGrid.uniform(30)
        with pytest.raises(ValueError):
            vp.vp_fit(np.zeros(30), self.builder(grid, 2), VpParams(15.0, 0.5))

    def test_nonfinite_objective_raises(self):
        grid = SampleGrid.uniform(30)

        def broken(p):
            basis = adaptive_hermite(grid, 2, p)
            d = (np.full_like(basis.dphi[0], np.nan), basis.dphi[1])
            return SampledBasis(basis.phi, d, basis.params, grid)

        with pytest.raises(DivergenceError) as info:
            vp.vp_fit(np.linspace(-1, 1, 30), broken, VpParams(15.0, 0.5))
        assert info.value.iteration == 0

    def test_no_warning_for_stable_rank(self, rng):
        grid = SampleGrid.uniform(80)
        with warnings.catch_warnings():
            warnings.simplefilter("error", RuntimeWarning)
            vp.vp_fit(rng.standard_normal(80), self.builder(grid, 3), VpParams(40.0, 0.2), steps=5)
