import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crnerf import linalg as la
from crnerf.linalg import GaussianSpec


def spd(dim, seed, cond=100.0):
    return la.random_spd(dim, np.random.default_rng(seed), cond)


class TestEigh:
    def test_identity(self):
        w, _ = la.eigh_symmetric(np.eye(4))
        np.testing.assert_allclose(w, 1.0)

    def test_diagonal(self):
        w, v = la.eigh_symmetric(np.diag([1.0, 4.0]))
        np.testing.assert_allclose(w, [4.0, 1.0])
        np.testing.assert_allclose(np.abs(v), [[0, 1], [1, 0]])

    def test_random_reconstruction(self):
        a = np.random.default_rng(0).normal(size=(6, 6))
        a = a + a.T
        w, v = la.eigh_symmetric(a)
        assert np.linalg.norm(v @ np.diag(w) @ v.T - a) / np.linalg.norm(a) < 1e-9
        assert np.max(np.abs(v.T @ v - np.eye(6))) < 1e-10
        assert np.all(np.diff(w) <= 0)

    def test_matches_lapack(self):
        a = spd(8, 1)
        np.testing.assert_allclose(la.eigh_symmetric(a)[0], np.linalg.eigvalsh(a)[::-1], rtol=1e-10)

    def test_non_convergence_reports_residual(self):
        a = np.array([[1.0, 2.0], [2.0, 3.0]])
        with pytest.raises(la.NotConvergedError, match="off-diagonal norm"):
            la.eigh_symmetric(a, max_sweeps=0)

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            la.eigh_symmetric(np.ones((2, 3)))


class TestSqrtm:
    def test_identity(self):
        np.testing.assert_allclose(la.sqrtm_psd(np.eye(3)), np.eye(3), atol=1e-15)

    def test_diagonal(self):
        np.testing.assert_allclose(la.sqrtm_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)
        np.testing.assert_allclose(la.sqrtm_psd(np.diag([4.0, 9.0]), inverse=True), np.diag([0.5, 1 / 3]), atol=1e-14)

    def test_random_square(self):
        a = spd(8, 2)
        s = la.sqrtm_psd(a)
        assert np.linalg.norm(s @ s - a) / np.linalg.norm(a) < 1e-8
        np.testing.assert_allclose(s, s.T, atol=0)
        assert np.linalg.eigvalsh(s).min() >= 0

    def test_inverse_square(self):
        a = spd(5, 3)
        s = la.sqrtm_psd(a, inverse=True)
        inv = np.linalg.inv(a)
        assert np.linalg.norm(s @ s - inv) / np.linalg.norm(inv) < 1e-8

    def test_semidefinite_is_clamped(self):
        a = np.outer([1.0, 2.0], [1.0, 2.0])
        s = la.sqrtm_psd(a)
        np.testing.assert_allclose(s @ s, a, atol=1e-12)

    def test_singular_inverse(self):
        with pytest.raises(la.SingularMatrixError):
            la.sqrtm_psd(np.diag([1.0, 0.0]), inverse=True)

    def test_indefinite(self):
        with pytest.raises(la.NotPSDError):
            la.sqrtm_psd(np.diag([1.0, -1.0]))


def objective_mc(t, cr, a, p, beta, n, rng):
    """Sample the two-term alignment objective directly."""
    f_cr = rng.multivariate_normal(cr.mean, cr.covariance, size=n)
    f_a = rng.multivariate_normal(a.mean, a.covariance, size=n)
    moved = (f_cr - cr.mean) @ t.T + a.mean
    first = np.sum((moved - f_a) ** 2, axis=1)
    second = np.sum((moved @ p.T - f_cr) ** 2, axis=1)
    return float(np.mean(first + beta * second))


class TestObjective:
    def test_zero_transform_zero_means(self):
        a = GaussianSpec(np.zeros(3), spd(3, 4))
        cr = GaussianSpec(np.zeros(3), spd(3, 5))
        assert la.transform_objective(np.zeros((3, 3)), cr, a, np.eye(3), 0.0) == pytest.approx(np.trace(a.covariance))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_monte_carlo(self, seed):
        rng = np.random.default_rng(seed)
        cr, a, p = la.random_instance(3, rng)
        t = rng.normal(size=(3, 3))
        exact = la.transform_objective(t, cr, a, p, 1.0)
        assert objective_mc(t, cr, a, p, 1.0, 1_000_000, rng) == pytest.approx(exact, rel=0.01)

    def test_monte_carlo_error_shrinks_with_samples(self):
        rng = np.random.default_rng(7)
        cr, a, p = la.random_instance(3, rng)
        t = rng.normal(size=(3, 3))
        exact = la.transform_objective(t, cr, a, p, 0.5)

        def rms_error(n):
            errs = [objective_mc(t, cr, a, p, 0.5, n, rng) - exact for _ in range(40)]
            return np.sqrt(np.mean(np.square(errs)))

        ratio = rms_error(4000) / rms_error(16000)
        # quadrupling N halves the error
        assert 1.4 < ratio < 2.9

    def test_shape_checks(self):
        cr = GaussianSpec(np.zeros(2), np.eye(2))
        with pytest.raises(ValueError):
            la.transform_objective(np.eye(3), cr, cr, np.eye(2), 1.0)


class TestClosedForm:
    def test_identity_case(self):
        s = spd(4, 8)
        g = GaussianSpec(np.zeros(4), s)
        np.testing.assert_allclose(la.closed_form_transform(g, g, np.eye(4)), np.eye(4), atol=1e-10)

    def test_scalar_case(self):
        t = la.closed_form_transform(GaussianSpec([0.0], [[4.0]]), GaussianSpec([0.0], [[9.0]]), [[1.0]])
        assert t[0, 0] == pytest.approx(1.5, abs=1e-14)

    def test_random_constraint(self):
        cr, a, p = la.random_instance(4, np.random.default_rng(9))
        t = la.closed_form_transform(cr, a, p)
        assert la.constraint_residual(t, cr, a) < 1e-8

    def test_beats_feasible_samples(self):
        rng = np.random.default_rng(10)
        cr, a, p = la.random_instance(5, rng)
        t = la.closed_form_transform(cr, a, p)
        for beta in (0.1, 1.0, 10.0):
            best = la.transform_objective(t, cr, a, p, beta)
            others = [la.transform_objective(la.sample_feasible_transform(cr, a, seed=s), cr, a, p, beta) for s in range(200)]
            assert best <= min(others) + 1e-9

    def test_inner_product_order_matters(self):
        # swapping P and P^T inside the root gives a map that misses the target covariance
        cr, a, p = la.random_instance(4, np.random.default_rng(11))
        s_half, s_inv = la.sqrtm_psd(cr.covariance), la.sqrtm_psd(cr.covariance, inverse=True)
        swapped = np.linalg.solve(p, s_inv @ la.sqrtm_psd(s_half @ p.T @ a.covariance @ p @ s_half) @ s_inv)
        assert la.constraint_residual(swapped, cr, a) > 1e-3

    def test_singular_p(self):
        g = GaussianSpec(np.zeros(2), np.eye(2))
        with pytest.raises(la.SingularMatrixError):
            la.closed_form_transform(g, g, np.diag([1.0, 1e-10]))

    def test_singular_cross_covariance(self):
        cr = GaussianSpec(np.zeros(2), np.diag([1.0, 0.0]))
        a = GaussianSpec(np.zeros(2), np.eye(2))
        with pytest.raises(la.SingularMatrixError):
            la.closed_form_transform(cr, a, np.eye(2))


class TestFeasible:
    def test_identity_rotation(self):
        cr = GaussianSpec(np.zeros(3), spd(3, 12))
        a = GaussianSpec(np.zeros(3), spd(3, 13))
        t = la.sample_feasible_transform(cr, a, q=np.eye(3))
        expected = la.sqrtm_psd(a.covariance) @ la.sqrtm_psd(cr.covariance, inverse=True)
        np.testing.assert_allclose(t, expected)
        assert la.constraint_residual(t, cr, a) < 1e-12

    def test_same_covariance_identity_rotation(self):
        g = GaussianSpec(np.zeros(3), spd(3, 14))
        np.testing.assert_allclose(la.sample_feasible_transform(g, g, q=np.eye(3)), np.eye(3), atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31), dim=st.integers(2, 8))
    def test_any_seed_is_feasible(self, seed, dim):
        cr, a, _ = la.random_instance(dim, np.random.default_rng(seed))
        assert la.constraint_residual(la.sample_feasible_transform(cr, a, seed=seed), cr, a) < 1e-8

    def test_haar_is_orthogonal(self):
        q = la.haar_orthogonal(6, np.random.default_rng(0))
        np.testing.assert_allclose(q.T @ q, np.eye(6), atol=1e-12)


def test_verify_transform_rows():
    rows = list(la.verify_transform(None, 7, 20, seed=3))
    assert [r["dim"] for r in rows] == [2, 3, 4, 5, 6, 7, 8]
    for r in rows:
        assert r["constraint_residual"] < 1e-8
        assert r["objective_closed_form"] <= r["min_objective_random"] + 1e-9


def test_gaussian_spec_validates_shape():
    with pytest.raises(ValueError):
        GaussianSpec(np.zeros(2), np.eye(3))


def test_cached_roots_give_the_same_sample():
    cr, a, _ = la.random_instance(5, np.random.default_rng(15))
    q = la.haar_orthogonal(5, np.random.default_rng(16))
    np.testing.assert_array_equal(
        la.sample_feasible_transform(cr, a, q=q, roots=la.feasible_roots(cr, a)),
        la.sample_feasible_transform(cr, a, q=q),
    )
