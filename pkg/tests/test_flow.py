import numpy as np
import pytest

from straightflow import calculus, core, estimate, flow, gaussian
from straightflow.errors import (
    InvalidArgumentError,
    TrajectoryLeftSupportError,
)

PI2_4 = np.pi**2 / 4


def const_oracle(c):
    c = np.asarray(c, dtype=float)
    return flow.VelocityOracle(lambda t, x: np.broadcast_to(c, np.shape(x)).copy(), "analytic", c.size)


def scaling_oracle():
    return flow.VelocityOracle(lambda t, x: np.asarray(x) / (1.0 + t), "analytic", 1)


@pytest.fixture(scope="module")
def oracle_affine_indep(affine_indep_spec):
    return flow.analytic_velocity_oracle(gaussian.from_process_spec(affine_indep_spec))


@pytest.fixture(scope="module")
def oracle_affine_det(affine_det2x_spec):
    return flow.analytic_velocity_oracle(gaussian.from_process_spec(affine_det2x_spec))


@pytest.fixture(scope="module")
def oracle_trig_det(trig_det_identity_spec):
    return flow.analytic_velocity_oracle(gaussian.from_process_spec(trig_det_identity_spec))


class TestIntegrate:
    def test_constant_velocity_exact(self):
        traj = flow.integrate(const_oracle([2.0, -1.0]), np.zeros(2), core.make_time_grid(7), "euler")
        expect = traj.grid.nodes[:, None] * np.array([2.0, -1.0])
        assert np.allclose(traj.states, expect, atol=1e-14)
        assert traj.n_evals == 7

    def test_scaling_field_rk4(self):
        traj = flow.integrate(scaling_oracle(), np.array([1.0]), core.make_time_grid(100), "rk4")
        assert traj.endpoint[0] == pytest.approx(2.0, abs=1e-9)
        assert traj.n_evals == 400

    def test_curved_flow_separates_schemes(self, oracle_affine_indep):
        euler1 = flow.integrate(oracle_affine_indep, np.array([1.0]), core.make_time_grid(1), "euler")
        assert euler1.endpoint[0] == pytest.approx(0.0, abs=1e-14)
        rk4 = flow.integrate(oracle_affine_indep, np.array([1.0]), core.make_time_grid(200), "rk4")
        assert abs(rk4.endpoint[0] - euler1.endpoint[0]) > 0.1
        # the true flow map is the identity at t=1 for equal marginals
        assert rk4.endpoint[0] == pytest.approx(1.0, abs=1e-6)

    def test_unknown_scheme_rejected(self):
        with pytest.raises(InvalidArgumentError):
            flow.integrate(const_oracle([0.0]), np.zeros(1), core.make_time_grid(2), "heun")

    def test_midpoint_second_order(self):
        # dx/dt = -x^3 from x0 = 1 has solution 1/sqrt(1 + 2t)
        cubic = flow.VelocityOracle(lambda t, x: -np.asarray(x) ** 3, "analytic", 1)
        exact = 1.0 / np.sqrt(3.0)

        def endpoint(steps):
            return flow.integrate(
                cubic, np.array([1.0]), core.make_time_grid(steps), "midpoint"
            ).endpoint[0]

        e1, e2 = abs(endpoint(50) - exact), abs(endpoint(100) - exact)
        assert e1 / e2 == pytest.approx(4.0, rel=0.2)

    def test_batch_matches_pointwise(self, oracle_affine_indep):
        pts = np.array([[-1.0], [0.3], [2.0]])
        grid = core.make_time_grid(37)
        batch = flow.integrate_many(oracle_affine_indep, pts, grid, "rk4")
        for i, p in enumerate(pts):
            single = flow.integrate(oracle_affine_indep, p, grid, "rk4")
            assert np.allclose(batch[i], single.states, atol=1e-13)

    def test_kernel_oracle_low_density_becomes_left_support(self, affine_indep_spec):
        ens = core.sample_paths(affine_indep_spec, 100, core.make_time_grid(4), seed=3)
        oracle = flow.kernel_velocity_oracle(ens, estimate.KernelConfig(density_floor=200.0))
        with pytest.raises(TrajectoryLeftSupportError) as err:
            flow.integrate(oracle, np.array([0.0]), core.make_time_grid(4), "euler")
        assert err.value.states.shape[0] >= 1

    def test_kernel_oracle_tracks_analytic(self, affine_indep_spec, ens_affine_indep_200k, oracle_affine_indep):
        from conftest import head_ensemble

        ens = head_ensemble(ens_affine_indep_200k, 50_000)
        # K=3 grid: kernel oracle interpolates between slices at 0, 0.5, 1
        oracle = flow.kernel_velocity_oracle(ens, estimate.KernelConfig())
        v_k = oracle(0.5, np.array([1.0]))
        v_a = oracle_affine_indep(0.5, np.array([1.0]))
        assert np.allclose(v_k, v_a, atol=0.05)


class TestFlowMap:
    def test_preserves_order_and_collects_errors(self, affine_indep_spec):
        ens = core.sample_paths(affine_indep_spec, 3000, core.make_time_grid(4), seed=5)
        oracle = flow.kernel_velocity_oracle(ens, estimate.KernelConfig())
        pts = np.array([[0.0], [0.5], [-0.5]])
        res = flow.flow_map(oracle, pts, core.make_time_grid(8), "midpoint")
        assert len(res.trajectories) == 3
        assert res.errors == []
        for i, traj in enumerate(res.trajectories):
            assert np.allclose(traj.states[0], pts[i])

    def test_analytic_batching(self, oracle_affine_det):
        pts = np.array([[0.1], [1.0], [-2.0]])
        res = flow.flow_map(oracle_affine_det, pts, core.make_time_grid(50), "rk4")
        ends = res.endpoints
        assert np.allclose(ends, 2.0 * pts, atol=1e-8)


class TestStraightness:
    def test_exact_line_zero(self):
        traj = flow.integrate(const_oracle([1.5]), np.array([0.7]), core.make_time_grid(10), "euler")
        dev = flow.straightness_deviation(traj)
        assert dev.chord_dev == pytest.approx(0.0, abs=1e-13)
        assert dev.second_diff == pytest.approx(0.0, abs=1e-10)

    def test_trig_deterministic_bulge(self, oracle_trig_det):
        traj = flow.integrate(oracle_trig_det, np.array([1.0]), core.make_time_grid(400), "rk4")
        dev = flow.straightness_deviation(traj)
        assert dev.chord_dev == pytest.approx(np.sqrt(2.0) - 1.0, abs=1e-3)

    def test_affine_deterministic_straight(self, oracle_affine_det):
        traj = flow.integrate(oracle_affine_det, np.array([1.0]), core.make_time_grid(100), "rk4")
        dev = flow.straightness_deviation(traj)
        assert dev.chord_dev <= 1e-6

    def test_needs_three_nodes(self):
        traj = flow.integrate(const_oracle([1.0]), np.zeros(1), core.make_time_grid(1), "euler")
        with pytest.raises(InvalidArgumentError):
            flow.straightness_deviation(traj)


class TestOneStep:
    def test_straight_flow_euler_exact(self, oracle_affine_det):
        pts = core.aux_rng(0, 9).standard_normal((100, 1))
        summary = flow.one_step_error(oracle_affine_det, pts)
        assert summary.max_error <= 1e-6

    def test_curved_flow_euler_wrong(self, oracle_affine_indep):
        summary = flow.one_step_error(oracle_affine_indep, np.array([[1.0]]))
        assert summary.max_error >= 0.5

    def test_zero_field(self):
        summary = flow.one_step_error(const_oracle([0.0]), np.array([[0.3], [1.0]]))
        assert summary.max_error == pytest.approx(0.0, abs=1e-14)


class TestSchemeConsistency:
    def test_rk4_reference_stability(self, oracle_affine_indep):
        e200 = flow.integrate(oracle_affine_indep, np.array([1.0]), core.make_time_grid(200), "rk4")
        e400 = flow.integrate(oracle_affine_indep, np.array([1.0]), core.make_time_grid(400), "rk4")
        assert abs(e200.endpoint[0] - e400.endpoint[0]) <= 1e-8


class TestTabulatedOracle:
    def test_linear_field_exact_interpolation(self):
        grid = calculus.make_spatial_grid([(-6.0, 6.0)], 25)
        vals = grid.meshgrid()[0][..., None].copy()
        f = calculus.GridField(grid, "vector", vals, 0.0)
        oracle = flow.tabulated_velocity_oracle([(0.0, f)])
        traj = flow.integrate(oracle, np.array([1.0]), core.make_time_grid(400), "rk4")
        assert traj.endpoint[0] == pytest.approx(np.e, abs=1e-6)


class TestEnergyDistance:
    def test_identical_samples_zero(self):
        x = np.linspace(-1, 1, 50)
        assert flow.energy_distance(x, x) == pytest.approx(0.0, abs=1e-12)

    def test_null_scale(self):
        rng = np.random.default_rng(8)
        a, b = rng.standard_normal(10_000), rng.standard_normal(10_000)
        assert flow.energy_distance(a, b) <= 0.01

    def test_mean_shift_detected(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal(10_000)
        b = rng.standard_normal(10_000) + 3.0
        assert flow.energy_distance(a, b) >= 1.0

    def test_fast_path_matches_bruteforce(self):
        rng = np.random.default_rng(10)
        a, b = rng.standard_normal(257), 0.5 * rng.standard_normal(301) + 0.2
        fast = flow.energy_distance(a, b)
        dab = np.abs(a[:, None] - b[None, :]).mean()
        daa = np.abs(a[:, None] - a[None, :]).mean()
        dbb = np.abs(b[:, None] - b[None, :]).mean()
        assert fast == pytest.approx(2 * dab - daa - dbb, rel=1e-12)

    def test_multivariate_chunked(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((300, 2))
        b = rng.standard_normal((280, 2)) + [1.0, 0.0]
        ed = flow.energy_distance(a, b)
        dab = np.linalg.norm(a[:, None] - b[None, :], axis=-1).mean()
        daa = np.linalg.norm(a[:, None] - a[None, :], axis=-1).mean()
        dbb = np.linalg.norm(b[:, None] - b[None, :], axis=-1).mean()
        assert ed == pytest.approx(2 * dab - daa - dbb, rel=1e-12)
        assert ed > 0.1

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            flow.energy_distance(np.array([]), np.array([1.0]))


class TestMarginalTransport:
    def test_flow_pushes_source_onto_target(self, affine_ot_spec):
        oracle = flow.analytic_velocity_oracle(gaussian.from_process_spec(affine_ot_spec))
        rng = core.aux_rng(0, 42)
        n = 2000
        src = affine_ot_spec.coupling.mu0.draw(rng, n)
        ends = flow.integrate_many(oracle, src, core.make_time_grid(200), "rk4")[:, -1, :]
        tgt = affine_ot_spec.coupling.mu1.draw(rng, n)
        observed = flow.energy_distance(ends, tgt)
        null = [
            flow.energy_distance(
                affine_ot_spec.coupling.mu1.draw(rng, n), affine_ot_spec.coupling.mu1.draw(rng, n)
            )
            for _ in range(20)
        ]
        assert observed <= np.quantile(null, 0.95)


class TestTripleAgreement:
    """second_diff, material-derivative norm and balance verdict agree."""

    TOL_SECOND = 1e-3
    TOL_MATERIAL = 1e-3
    TOL_BALANCE = 1e-3

    @pytest.mark.parametrize(
        "spec_name,expected_straight",
        [
            ("affine_det2x_spec", True),
            ("trig_indep_spec", True),
            ("affine_indep_spec", False),
            ("trig_det_identity_spec", False),
        ],
    )
    def test_indicators_agree(self, spec_name, expected_straight, request):
        spec = request.getfixturevalue(spec_name)
        g = gaussian.from_process_spec(spec)
        oracle = flow.analytic_velocity_oracle(g)

        traj = flow.integrate(oracle, np.array([1.0]), core.make_time_grid(200), "rk4")
        second_ok = flow.straightness_deviation(traj).second_diff <= self.TOL_SECOND

        t, h_t = 0.4, 1e-5
        grid = calculus.make_spatial_grid(gaussian.oracle_box(g, t), 61)
        fields = [gaussian.fields_on_grid(g, tt, grid) for tt in (t - h_t, t, t + h_t)]
        dtv = calculus.material_derivative(
            fields[0]["v"], fields[1]["v"], fields[2]["v"], h_t
        )
        material_ok = (
            calculus.field_norms(dtv)["max_abs"] <= self.TOL_MATERIAL
        )
        bal = calculus.balance_residual(
            fields[1]["rho"], fields[1]["Pi"], fields[1]["a"], tolerance=self.TOL_BALANCE
        )
        balance_ok = bal.verdict == "straight-compatible"

        assert second_ok == expected_straight
        assert material_ok == expected_straight
        assert balance_ok == expected_straight
