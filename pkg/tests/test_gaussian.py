import numpy as np
import pytest

from straightflow import core, gaussian
from straightflow.errors import (
    CapabilityError,
    DegenerateMarginalError,
    InvalidArgumentError,
)

from conftest import gauss1, make_spec

PI2_4 = np.pi**2 / 4


@pytest.fixture(scope="module")
def g_affine_indep(affine_indep_spec):
    return gaussian.from_process_spec(affine_indep_spec)


@pytest.fixture(scope="module")
def g_trig_indep(trig_indep_spec):
    return gaussian.from_process_spec(trig_indep_spec)


@pytest.fixture(scope="module")
def g_affine_det2x(affine_det2x_spec):
    return gaussian.from_process_spec(affine_det2x_spec)


class TestMarginalMoments:
    def test_affine_independent_midpoint(self, g_affine_indep):
        mom = gaussian.marginal_moments(g_affine_indep, 0.5)
        assert mom.mean == pytest.approx(0.0)
        assert mom.cov[0, 0] == pytest.approx(0.5)

    def test_trig_independent_unit_variance(self, g_trig_indep):
        for t in (0.0, 0.21, 0.5, 0.87, 1.0):
            mom = gaussian.marginal_moments(g_trig_indep, t)
            assert mom.cov[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_endpoint_condition(self):
        spec = gaussian.GaussianProcessSpec(
            np.array([1.5]), np.array([-2.0]), np.array([[0.7]]),
            np.zeros((1, 1)), np.array([[3.0]]),
            core.affine_alpha(), core.affine_beta(),
        )
        mom = gaussian.marginal_moments(spec, 0.0)
        assert mom.mean[0] == pytest.approx(1.5)
        assert mom.cov[0, 0] == pytest.approx(0.7)

    def test_degenerate_flagged(self):
        spec = gaussian.GaussianProcessSpec(
            np.zeros(1), np.zeros(1), np.zeros((1, 1)), np.zeros((1, 1)), np.eye(1),
            core.affine_alpha(), core.affine_beta(),
        )
        assert gaussian.marginal_moments(spec, 0.0).degenerate
        assert not gaussian.marginal_moments(spec, 0.5).degenerate


class TestConditionalFields:
    def test_affine_independent_t0(self, g_affine_indep):
        fv = gaussian.conditional_fields(g_affine_indep, 0.0, np.array([0.7]))
        assert fv.v[0] == pytest.approx(-0.7, abs=1e-12)
        assert fv.Pi[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert fv.a[0] == pytest.approx(0.0, abs=1e-12)

    def test_affine_independent_midpoint(self, g_affine_indep):
        x = np.array([0.3])
        fv = gaussian.conditional_fields(g_affine_indep, 0.5, x)
        assert fv.v[0] == pytest.approx(0.0, abs=1e-12)
        assert fv.Pi[0, 0] == pytest.approx(2.0, abs=1e-12)
        expected_rho = np.exp(-x[0] ** 2 / 1.0) / np.sqrt(2 * np.pi * 0.5)
        assert fv.rho == pytest.approx(expected_rho, rel=1e-12)

    def test_trig_independent(self, g_trig_indep):
        for t in (0.15, 0.5, 0.8):
            fv = gaussian.conditional_fields(g_trig_indep, t, np.array([1.2]))
            assert fv.v[0] == pytest.approx(0.0, abs=1e-12)
            assert fv.a[0] == pytest.approx(-PI2_4 * 1.2, abs=1e-10)
            assert fv.Pi[0, 0] == pytest.approx(PI2_4, abs=1e-10)

    def test_deterministic_scaling(self):
        # T(x) = 2x via the joint-Gaussian route: v = x/(1+t), Pi = 0
        cov = np.array([[1.0, 2.0], [2.0, 4.0]])
        cpl = core.gaussian_joint_coupling(np.zeros(2), cov)
        spec = make_spec("affine", cpl)
        g = gaussian.from_process_spec(spec)
        for t in (0.2, 0.6):
            fv = gaussian.conditional_fields(g, t, np.array([0.9]))
            assert fv.v[0] == pytest.approx(0.9 / (1 + t), rel=1e-10)
            assert fv.Pi[0, 0] == pytest.approx(0.0, abs=1e-10)

    def test_pi_independent_of_x(self, g_affine_indep):
        f1 = gaussian.conditional_fields(g_affine_indep, 0.3, np.array([-2.0]))
        f2 = gaussian.conditional_fields(g_affine_indep, 0.3, np.array([1.4]))
        assert np.allclose(f1.Pi, f2.Pi, atol=0.0)

    def test_sigma_decomposition(self, g_affine_indep):
        fv = gaussian.conditional_fields(g_affine_indep, 0.3, np.array([0.8]))
        assert np.allclose(fv.Sigma, fv.Pi + np.outer(fv.v, fv.v))

    def test_degenerate_marginal_raises(self):
        spec = gaussian.GaussianProcessSpec(
            np.zeros(1), np.zeros(1), np.zeros((1, 1)), np.zeros((1, 1)), np.eye(1),
            core.affine_alpha(), core.affine_beta(),
        )
        with pytest.raises(DegenerateMarginalError):
            gaussian.conditional_fields(spec, 0.0, np.zeros(1))

    def test_batch_matches_pointwise(self, g_affine_indep):
        X = np.array([[-1.0], [0.0], [2.5]])
        rho, V, A, Sigma, Pi = gaussian.conditional_fields_batch(g_affine_indep, 0.3, X)
        for i, x in enumerate(X):
            fv = gaussian.conditional_fields(g_affine_indep, 0.3, x)
            assert rho[i] == pytest.approx(fv.rho, rel=1e-12)
            assert np.allclose(V[i], fv.v)
            assert np.allclose(A[i], fv.a)
            assert np.allclose(Sigma[i], fv.Sigma)
        assert np.allclose(Pi, fv.Pi)


class TestOtMap:
    def test_identity_transport(self):
        S = np.array([[2.0, 0.3], [0.3, 1.0]])
        m0, m1 = np.array([1.0, -1.0]), np.array([0.5, 4.0])
        amap = gaussian.gaussian_ot_map(m0, S, m1, S)
        assert np.allclose(amap.A, np.eye(2), atol=1e-10)
        assert np.allclose(amap.b, m1 - m0, atol=1e-10)

    def test_scalar_scaling(self):
        amap = gaussian.gaussian_ot_map(np.zeros(1), np.eye(1), np.zeros(1), np.array([[4.0]]))
        assert amap.A[0, 0] == pytest.approx(2.0, abs=1e-12)
        assert amap.b[0] == pytest.approx(0.0, abs=1e-12)

    def test_commuting_diagonal(self):
        amap = gaussian.gaussian_ot_map(
            np.zeros(2), np.eye(2), np.zeros(2), np.diag([4.0, 9.0])
        )
        assert np.allclose(amap.A, np.diag([2.0, 3.0]), atol=1e-10)

    def test_map_is_spd(self):
        rng = np.random.default_rng(3)
        M = rng.standard_normal((2, 2))
        S1 = M @ M.T + 0.5 * np.eye(2)
        amap = gaussian.gaussian_ot_map(np.zeros(2), np.eye(2), np.zeros(2), S1)
        assert np.allclose(amap.A, amap.A.T)
        assert np.linalg.eigvalsh(amap.A).min() > 0

    def test_pushforward_covariance(self):
        rng = np.random.default_rng(21)
        n = 10_000
        S0 = np.array([[1.0, 0.4], [0.4, 2.0]])
        S1 = np.array([[3.0, -0.5], [-0.5, 0.8]])
        amap = gaussian.gaussian_ot_map(np.zeros(2), S0, np.ones(2), S1)
        x = rng.multivariate_normal(np.zeros(2), S0, size=n)
        y = amap(x)
        emp = np.cov(y, rowvar=False, ddof=1)
        se = np.sqrt(2.0 / n) * np.sqrt(np.outer(np.diag(S1), np.diag(S1))) * 2
        assert np.all(np.abs(emp - S1) <= 4 * se + 4 * np.sqrt(2.0 / n))
        assert np.allclose(y.mean(axis=0), np.ones(2), atol=4 * np.sqrt(3.0 / n) + 0.05)

    def test_singular_source_rejected(self):
        with pytest.raises(InvalidArgumentError):
            gaussian.gaussian_ot_map(np.zeros(1), np.zeros((1, 1)), np.zeros(1), np.eye(1))


class TestMaterialDerivative:
    def test_deterministic_scaling_vanishes(self):
        cov = np.array([[1.0, 2.0], [2.0, 4.0]])
        cpl = core.gaussian_joint_coupling(np.zeros(2), cov)
        g = gaussian.from_process_spec(make_spec("affine", cpl))
        for t in (0.2, 0.5, 0.8):
            md = gaussian.material_derivative_analytic(g, t, np.array([1.3]))
            assert abs(md.value[0]) <= 1e-8
            assert not md.one_sided

    def test_affine_independent_midpoint(self, g_affine_indep):
        for x in (-1.5, 0.4, 2.0):
            md = gaussian.material_derivative_analytic(g_affine_indep, 0.5, np.array([x]))
            assert md.value[0] == pytest.approx(4.0 * x, abs=1e-6)

    def test_trig_independent_vanishes(self, g_trig_indep):
        for t in (0.1, 0.5, 0.9):
            md = gaussian.material_derivative_analytic(g_trig_indep, t, np.array([0.7]))
            assert abs(md.value[0]) <= 1e-8

    def test_edges_flagged_one_sided(self, g_affine_indep):
        assert gaussian.material_derivative_analytic(g_affine_indep, 0.0, np.zeros(1)).one_sided
        assert gaussian.material_derivative_analytic(g_affine_indep, 1.0, np.zeros(1)).one_sided
        assert not gaussian.material_derivative_analytic(g_affine_indep, 0.4, np.zeros(1)).one_sided


class TestFromProcessSpec:
    def test_empirical_coupling_rejected(self):
        cpl = core.CouplingSpec(
            "deterministic_map", core.Empirical([[0.0], [1.0]]), core.Empirical([[0.0], [2.0]])
        )
        with pytest.raises(CapabilityError):
            gaussian.from_process_spec(make_spec("affine", cpl))

    def test_mixture_rejected(self):
        mix = core.GaussianMixture(
            np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.array([[[0.2]], [[0.2]]])
        )
        cpl = core.CouplingSpec("independent", mix, gauss1())
        with pytest.raises(CapabilityError):
            gaussian.from_process_spec(make_spec("affine", cpl))

    def test_latent_marginal_includes_bridge_variance(self, latent_spec):
        g = gaussian.from_process_spec(latent_spec)
        mom = gaussian.marginal_moments(g, 0.5)
        # (1-t)^2 + t^2 + t(1-t) at t = 1/2
        assert mom.cov[0, 0] == pytest.approx(0.75, abs=1e-12)
