"""Tests for timescale schedules, the coupled flow integrators and the two-timescale scheme."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.modules.mdp_model import one_hot_features, sample_random_mdp, uniform_policy
from src.modules.exact_dp import solve_optimal
from src.modules.critic import best_parameters
from src.modules.flow import (
    CSV_COLUMNS,
    FlowIntegrator,
    FlowState,
    Snapshot,
    TimescaleSchedule,
    Trajectory,
    flow_rhs,
    integrate,
    run_two_timescale,
)
from src.utils.errors import BlowupDetected, ValidationError


@pytest.fixture
def small_instance():
    mdp, features, _ = sample_random_mdp(8, 2, 2, 0.3, 1.0)
    return mdp, features


def _final_state(trajectory):
    last = trajectory.snapshots[-1]
    return np.concatenate([last.theta, last.log_density.ravel()])


class TestSchedule:

    def test_constant(self):
        schedule = TimescaleSchedule(kind='constant', eta0=3.0)
        assert schedule.eta(10.0) == 3.0
        assert schedule.integral(1.0, 2.5) == pytest.approx(4.5)

    def test_exponential(self):
        schedule = TimescaleSchedule(kind='exponential', eta0=2.0, k1=0.5)
        assert schedule.eta(2.0) == pytest.approx(2.0 * math.e)
        assert schedule.derivative(0.0) == pytest.approx(1.0)
        assert schedule.integral(0.0, 2.0) == pytest.approx(4.0 * (math.e - 1.0))

    def test_polynomial(self):
        schedule = TimescaleSchedule(kind='polynomial', eta0=2.5, p=0.5)
        assert schedule.eta(4.0) == pytest.approx(4.5)
        assert schedule.integral(0.0, 4.0) == pytest.approx(16.0 / 3.0 + 10.0)

    @pytest.mark.parametrize('spec', [
        {'kind': 'linear'},
        {'eta0': 0.5},
        {'kind': 'exponential', 'k1': -1.0},
        {'kind': 'polynomial', 'p': 1.5},
    ])
    def test_invalid(self, spec):
        with pytest.raises(ValidationError):
            TimescaleSchedule.from_dict(spec)

    def test_dict_form(self):
        schedule = TimescaleSchedule(kind='polynomial', eta0=2.0, p=0.25)
        assert TimescaleSchedule.from_dict(schedule.to_dict()) == schedule


class TestTrajectory:

    def _snapshot(self, t):
        zeros = np.zeros(2)
        return Snapshot(t, zeros, np.zeros((1, 2)), 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def test_times_must_increase(self):
        trajectory = Trajectory()
        trajectory.append(self._snapshot(0.0))
        with pytest.raises(ValidationError):
            trajectory.append(self._snapshot(0.0))

    def test_rows_follow_csv_columns(self):
        assert len(self._snapshot(1.0).row()) == len(CSV_COLUMNS)
        assert CSV_COLUMNS[0] == 't'


class TestIntegration:

    def test_equilibrium_is_stationary(self, small_instance):
        mdp, features = small_instance
        optimal = solve_optimal(mdp)
        theta_star, _ = best_parameters(optimal.policy, mdp, features)
        trajectory = integrate(FlowState(0.0, theta_star, optimal.policy), mdp, features,
                               TimescaleSchedule(eta0=10.0), t_end=2.0, dt=0.01, output_times=[0.0, 1.0, 2.0])
        assert np.max(np.abs(trajectory.column('gap'))) <= 1e-10
        assert np.max(trajectory.column('theta_err')) <= 1e-9
        assert_allclose(trajectory.thetas[-1], theta_star, atol=1e-9)

    def test_output_grid(self, small_instance):
        mdp, features = small_instance
        trajectory = integrate(FlowState(0.0, np.zeros(features.dim), uniform_policy(mdp)), mdp, features,
                               TimescaleSchedule(eta0=5.0), t_end=1.0, dt=0.05,
                               output_times=[0.0, 0.3, 0.7, 1.0])
        assert_allclose(trajectory.times, [0.0, 0.3, 0.7, 1.0])
        assert np.max(trajectory.column('normalisation')) <= 1e-10

    def test_rhs_matches_derivative_form(self, small_instance):
        mdp, features = small_instance
        integrator = FlowIntegrator(mdp, features, TimescaleSchedule(eta0=3.0))
        theta = np.linspace(-1.0, 1.0, features.dim)
        pi = uniform_policy(mdp)
        dtheta, dl = flow_rhs(FlowState(0.0, theta, pi), mdp, features, integrator.schedule)
        reference_dtheta, du = integrator._derivatives(0.0, theta, pi.log_density)
        assert_allclose(dtheta, reference_dtheta)
        # du differs from dl only by a state-constant gauge
        gauge = du - dl
        assert_allclose(gauge - gauge[:, :1], 0.0, atol=1e-12)

    def test_rk4_and_exponential_euler_agree(self):
        mdp, features, _ = sample_random_mdp(8, 3, 2, 0.3, 0.5)
        start = FlowState(0.0, np.zeros(features.dim), uniform_policy(mdp))
        schedule = TimescaleSchedule(eta0=1.0)

        def final(method, dt):
            return _final_state(integrate(start, mdp, features, schedule, 0.5, method=method, dt=dt,
                                          output_times=[0.5]))

        rk4 = final('rk4', 1e-3)
        assert np.max(np.abs(rk4 - final('rk4', 5e-4))) <= 1e-10
        # first-order error cancels between dt and dt/2
        extrapolated = 2.0 * final('exponential-euler', 5e-4) - final('exponential-euler', 1e-3)
        assert np.max(np.abs(extrapolated - rk4)) < 1e-5

    def test_exponential_euler_is_first_order(self, small_instance):
        mdp, features = small_instance
        start = FlowState(0.0, np.zeros(features.dim), uniform_policy(mdp))
        schedule = TimescaleSchedule(eta0=1.0)
        reference = _final_state(integrate(start, mdp, features, schedule, 1.0, method='rk4', dt=1e-3,
                                           output_times=[1.0]))
        errors = [np.linalg.norm(_final_state(integrate(start, mdp, features, schedule, 1.0,
                                                        method='exponential-euler', dt=dt,
                                                        output_times=[1.0])) - reference)
                  for dt in (0.02, 0.01)]
        order = math.log2(errors[0] / errors[1])
        assert 0.8 <= order <= 1.2

    def test_exact_critic_decreases_value(self, small_instance):
        mdp, features = small_instance
        trajectory = integrate(FlowState(0.0, np.zeros(features.dim), uniform_policy(mdp)), mdp, features,
                               TimescaleSchedule(eta0=1.0), t_end=5.0, dt=0.01, critic_mode='exact')
        assert np.all(np.diff(trajectory.column('V_rho')) <= 1e-10)
        assert trajectory.critic_mode == 'exact'

    def test_guard_raises_or_truncates(self, small_instance):
        mdp, features = small_instance
        integrator = FlowIntegrator(mdp, features, TimescaleSchedule(eta0=5.0), theta_guard=1e-3)
        start = FlowState(0.0, np.zeros(features.dim), uniform_policy(mdp))
        with pytest.raises(BlowupDetected) as excinfo:
            integrator.integrate(start, 1.0, dt=0.01)
        assert excinfo.value.t > 0.0
        trajectory = integrator.integrate(start, 1.0, dt=0.01, on_blowup='truncate')
        assert trajectory.blowup is not None
        assert len(trajectory) >= 1

    def test_explicit_zero_guard_is_kept(self, small_instance):
        mdp, features = small_instance
        integrator = FlowIntegrator(mdp, features, TimescaleSchedule(eta0=5.0), theta_guard=0.0)
        assert integrator.theta_guard == 0.0
        with pytest.raises(BlowupDetected):
            integrator.integrate(FlowState(0.0, np.zeros(features.dim), uniform_policy(mdp)), 0.1, dt=0.01)

    def test_reruns_are_identical(self, small_instance):
        mdp, features = small_instance
        start = FlowState(0.0, np.zeros(features.dim), uniform_policy(mdp))
        first = integrate(start, mdp, features, TimescaleSchedule(eta0=4.0), 2.0, dt=0.02)
        second = integrate(start, mdp, features, TimescaleSchedule(eta0=4.0), 2.0, dt=0.02)
        assert first.to_rows() == second.to_rows()

    def test_invalid_arguments(self, small_instance):
        mdp, features = small_instance
        start = FlowState(0.0, np.zeros(features.dim), uniform_policy(mdp))
        with pytest.raises(ValidationError):
            integrate(start, mdp, features, TimescaleSchedule(), 0.0)
        with pytest.raises(ValidationError):
            integrate(start, mdp, features, TimescaleSchedule(), 1.0, method='euler')
        with pytest.raises(ValidationError):
            integrate(start, mdp, features, TimescaleSchedule(), 1.0, output_times=[0.5, 0.2])


class TestTwoTimescale:

    def test_scheme_converges_to_flow(self, small_instance):
        mdp, features = small_instance
        theta0 = np.zeros(features.dim)
        pi0 = uniform_policy(mdp)
        eta = 2.0
        reference = _final_state(integrate(FlowState(0.0, theta0, pi0), mdp, features, TimescaleSchedule(eta0=eta),
                                           1.0, method='rk4', dt=1e-3, output_times=[1.0]))
        errors = []
        for lam in (0.02, 0.01):
            trajectory = run_two_timescale(theta0, pi0, mdp, features, eta * lam, lam, int(round(1.0 / lam)),
                                           output_every=10)
            assert trajectory.times[-1] == pytest.approx(1.0)
            errors.append(np.linalg.norm(_final_state(trajectory) - reference))
        order = math.log2(errors[0] / errors[1])
        assert 0.8 <= order <= 1.2

    def test_timescale_separation_enforced(self, small_instance):
        mdp, features = small_instance
        with pytest.raises(ValidationError):
            run_two_timescale(np.zeros(features.dim), uniform_policy(mdp), mdp, features, 0.01, 0.01, 5)

    def test_step_sequences(self, small_instance):
        mdp, features = small_instance
        trajectory = run_two_timescale(np.zeros(features.dim), uniform_policy(mdp), mdp, features,
                                       [0.2, 0.2, 0.1], lambda n: 0.05, 3)
        assert_allclose(trajectory.times, [0.0, 0.05, 0.1, 0.15])
        assert trajectory.method == 'two-timescale'
        with pytest.raises(ValidationError):
            run_two_timescale(np.zeros(features.dim), uniform_policy(mdp), mdp, features, [0.2], 0.05, 2)

    def test_one_hot_scheme_improves_value(self):
        mdp, _, _ = sample_random_mdp(12, 3, 2, 0.5, 0.5)
        features = one_hot_features(mdp)
        trajectory = run_two_timescale(np.zeros(features.dim), uniform_policy(mdp), mdp, features,
                                       0.5, 0.05, 400, output_every=100)
        gaps = trajectory.column('gap')
        assert gaps[-1] < gaps[0]
        assert gaps[-1] >= -1e-10
