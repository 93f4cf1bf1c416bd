"""Tests for the bound constants, derivative oracles and the certificate suite."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from src.modules.mdp_model import policy_from_logits, sample_random_mdp, uniform_policy
from src.modules.critic import gram_data
from src.modules.actor import approx_advantage, policy_velocity
from src.modules.flow import FlowIntegrator, FlowState, TimescaleSchedule
from src.modules.analysis import (
    EXPECTED_FAIL,
    FAIL,
    NOT_APPLICABLE,
    PASS,
    CertificateEntry,
    CertificateReport,
    CertificateSuite,
    _inequality_entry,
    compute_constants,
    dq_dt_oracle,
    dtheta_pi_bound,
    dtheta_pi_dt,
    exp_weighted_integrals,
    finite_difference_dq,
    gronwall_envelope,
    gronwall_resolvent,
)
from src.utils.errors import InadmissibleEta, NotTangent, ValidationError


def _stable_run(mdp, features, schedule, t_end, dt, n_outputs=100, critic_mode='semi-gradient'):
    theta0 = np.zeros(features.dim)
    pi0 = uniform_policy(mdp)
    integrator = FlowIntegrator(mdp, features, schedule, critic_mode=critic_mode)
    trajectory = integrator.integrate(FlowState(0.0, theta0, pi0), t_end, dt=dt,
                                      output_times=np.linspace(0.0, t_end, n_outputs + 1))
    constants = compute_constants(mdp, features, theta0, pi0, schedule, strict=False, optimal=integrator.optimal)
    suite = CertificateSuite(mdp, features, schedule, constants, integrator.optimal)
    return trajectory, constants, suite


class TestQuadrature:

    def test_constant_integrand(self):
        times = np.linspace(0.0, 3.0, 31)
        assert_allclose(exp_weighted_integrals(times, np.ones_like(times), 0.7),
                        -np.expm1(-0.7 * times) / 0.7, atol=1e-13)

    def test_linear_integrand_is_exact(self):
        times = np.sort(np.concatenate([[0.0], np.random.default_rng(0).uniform(0.0, 4.0, 40), [4.0]]))
        rate = 1.3
        expected = times / rate - (-np.expm1(-rate * times)) / rate ** 2
        assert_allclose(exp_weighted_integrals(times, times, rate), expected, atol=1e-12)

    def test_small_rate_series(self):
        times = np.linspace(0.0, 1.0, 11)
        assert_allclose(exp_weighted_integrals(times, np.ones_like(times), 1e-6), times, atol=1e-6)

    def test_halving_snapshot_spacing(self, one_hot_2x2):
        mdp, features = one_hot_2x2
        trajectory, _, _ = _stable_run(mdp, features, TimescaleSchedule(eta0=20.0), t_end=10.0, dt=0.005,
                                       n_outputs=2000)
        times, k_sq = trajectory.times, trajectory.column('K_t') ** 2
        fine = exp_weighted_integrals(times, k_sq, mdp.tau)[::2]
        coarse = exp_weighted_integrals(times[::2], k_sq[::2], mdp.tau)
        assert np.max(np.abs(fine - coarse)) <= 1e-4 * np.max(np.abs(fine))


class TestGronwall:

    @given(a1=st.floats(0.1, 10.0), a2=st.floats(0.0, 0.9), tau=st.floats(1.0, 3.0))
    def test_resolvent_solves_integral_equation(self, a1, a2, tau):
        times = np.linspace(0.0, 5.0, 5001)
        y = gronwall_resolvent(a1, a2, tau, times)
        assert_allclose(y, a1 + a2 * exp_weighted_integrals(times, y, tau), rtol=1e-5)

    @given(a1=st.floats(0.1, 10.0), a2=st.floats(0.0, 5.0), tau=st.floats(0.1, 3.0))
    def test_resolvent_below_envelope(self, a1, a2, tau):
        times = np.linspace(0.0, 10.0, 101)
        assert np.all(gronwall_resolvent(a1, a2, tau, times) <= gronwall_envelope(a1, a2, times) * (1 + 1e-12))

    def test_resolvent_bounded_when_a2_below_tau(self):
        y = gronwall_resolvent(2.0, 0.5, 1.0, np.array([1e3]))
        assert y[0] == pytest.approx(2.0 * 1.0 / (1.0 - 0.5))

    def test_envelope_saturates_on_long_horizons(self):
        with warnings.catch_warnings():
            warnings.simplefilter('error')
            envelope = gronwall_envelope(3.0, 5.0, np.array([0.0, 10.0, 1e3, 1e5]))
        assert np.all(np.isfinite(envelope))
        assert envelope[0] == pytest.approx(3.0)
        assert np.all(np.diff(envelope) >= 0)

    def test_infinite_right_hand_side_holds(self):
        times = np.array([0.0, 1.0, 2.0])
        with warnings.catch_warnings():
            warnings.simplefilter('error')
            entry = _inequality_entry('check', times, np.array([1.0, 2.0, 3.0]),
                                      np.array([2.0, np.inf, np.inf]), {'h': True}, {})
        assert entry.status == PASS
        assert entry.t_worst == 0.0
        assert entry.margin == pytest.approx(1.0)


class TestConstants:

    def test_inadmissible_eta(self, make_random_mdp):
        mdp, features, _ = make_random_mdp(0, gamma=0.3)
        theta0, pi0 = np.zeros(features.dim), uniform_policy(mdp)
        with pytest.raises(InadmissibleEta) as excinfo:
            compute_constants(mdp, features, theta0, pi0, TimescaleSchedule(eta0=1.0))
        assert excinfo.value.threshold > 1.0
        constants = compute_constants(mdp, features, theta0, pi0, TimescaleSchedule(eta0=1.0), strict=False)
        assert not constants.eta0_stable
        assert math.isnan(constants.a1)
        assert constants.consistency_errors() == []

    def test_small_gamma_regime(self, one_hot_2x2):
        mdp, features = one_hot_2x2
        constants = compute_constants(mdp, features, np.zeros(features.dim), uniform_policy(mdp),
                                      TimescaleSchedule(eta0=20.0))
        assert constants.eta0_admissible
        assert constants.small_gamma_flag
        assert constants.a2 < constants.tau
        assert constants.kl_bound_sq == pytest.approx(constants.a1 * constants.tau / (constants.tau - constants.a2))
        assert constants.consistency_errors() == []
        assert set(constants.to_dict()) >= {'gamma_const', 'eta0_admissible', 'theta_radius'}

    def test_large_discount_fails_small_gamma(self, make_random_mdp):
        mdp, features, _ = make_random_mdp(0, gamma=0.9)
        constants = compute_constants(mdp, features, np.zeros(features.dim), uniform_policy(mdp),
                                      TimescaleSchedule(eta0=1e4))
        assert not constants.small_gamma_flag
        assert math.isnan(constants.kl_bound_sq)


class TestDerivatives:

    @pytest.mark.parametrize('seed', range(5))
    def test_dq_dt_matches_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        mdp, features, _ = sample_random_mdp(seed, 3, 2, 0.6, 0.5)
        pi = policy_from_logits(rng.normal(size=(3, 2)), mdp.mu)
        direction = -approx_advantage(rng.normal(size=features.dim), pi, mdp, features).a
        analytic = dq_dt_oracle(pi, policy_velocity(pi, direction), mdp)
        numeric = finite_difference_dq(pi, direction, mdp, 1e-5)
        assert np.max(np.abs(analytic - numeric)) <= 1e-4 * np.max(np.abs(analytic)) + 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_dtheta_pi_bound(self, seed):
        rng = np.random.default_rng(seed)
        mdp, features, _ = sample_random_mdp(seed, 3, 2, 0.6, 0.5, 'linear-mdp')
        pi = policy_from_logits(rng.normal(size=(3, 2)), mdp.mu)
        velocity = policy_velocity(pi, -approx_advantage(rng.normal(size=features.dim), pi, mdp, features).a)
        norm = np.linalg.norm(dtheta_pi_dt(pi, velocity, mdp, features))
        assert norm <= dtheta_pi_bound(pi, velocity, mdp, features.lambda_beta) + 1e-8

    def test_velocity_must_be_tangent(self, two_cycle_mdp):
        with pytest.raises(NotTangent):
            dq_dt_oracle(uniform_policy(two_cycle_mdp), np.ones((2, 2)), two_cycle_mdp)


class TestReport:

    def test_duplicate_names_rejected(self):
        report = CertificateReport()
        report.add(CertificateEntry('drift', PASS, 1.0, 0.0))
        with pytest.raises(ValidationError):
            report.add(CertificateEntry('drift', PASS, 1.0, 0.0))

    def test_counts_and_failures(self):
        report = CertificateReport()
        report.extend([CertificateEntry('a', PASS, 1.0, 0.0), CertificateEntry('b', EXPECTED_FAIL, -1.0, 1.0),
                       CertificateEntry('c', NOT_APPLICABLE, math.nan, math.nan)])
        assert not report.has_failures
        report.add(CertificateEntry('d', FAIL, -1.0, 2.0))
        assert report.has_failures
        assert report.counts() == {PASS: 1, FAIL: 1, EXPECTED_FAIL: 1, NOT_APPLICABLE: 1}
        assert [entry['name'] for entry in report.to_dict()['checks']] == ['a', 'b', 'c', 'd']


class TestSuite:

    def test_stable_run_passes_stability_checks(self, one_hot_2x2):
        mdp, features = one_hot_2x2
        schedule = TimescaleSchedule(eta0=20.0)
        trajectory, constants, suite = _stable_run(mdp, features, schedule, t_end=20.0, dt=0.01)
        report = suite.run(trajectory, enabled=['lyapunov_drift', 'gronwall_kl', 'uniform_bounds',
                                                'bounds_along_flow', 'theta_pi_rate'])
        for name in ('lyapunov_drift', 'gronwall_kl_integral', 'gronwall_kl_envelope', 'uniform_kl_bound',
                     'uniform_theta_bound', 'velocity_tv_bound', 'advantage_bound', 'exact_value_bound',
                     'log_density_bound', 'theta_pi_rate'):
            assert report.get(name).status == PASS, name

    @pytest.mark.parametrize('seed', range(10))
    def test_lyapunov_drift_on_stable_runs(self, make_random_mdp, seed):
        mdp, features, _ = make_random_mdp(seed, gamma=0.3)
        eta0 = max(1.0, 2.0 * mdp.tau / gram_data(mdp, features).gamma_const)
        trajectory, constants, suite = _stable_run(mdp, features, TimescaleSchedule(eta0=eta0), t_end=5.0,
                                                   dt=0.01, n_outputs=50)
        assert constants.eta0_stable
        entry = suite.run(trajectory, enabled=['lyapunov_drift']).get('lyapunov_drift')
        assert entry.status == PASS
        assert entry.details['n_points'] == 51

    def test_uniform_bounds_over_long_horizon(self, one_hot_2x2):
        mdp, features = one_hot_2x2
        trajectory, constants, suite = _stable_run(mdp, features, TimescaleSchedule(eta0=20.0), t_end=50.0,
                                                   dt=0.02, n_outputs=200)
        assert constants.small_gamma_flag
        report = suite.run(trajectory, enabled=['uniform_bounds', 'gronwall_kl'])
        for name in ('uniform_kl_bound', 'uniform_theta_bound', 'gronwall_kl_integral', 'gronwall_kl_envelope'):
            assert report.get(name).status == PASS, name

    def test_unstable_eta_is_not_a_failure(self, make_random_mdp):
        mdp, features, _ = make_random_mdp(7, gamma=0.3)
        schedule = TimescaleSchedule(eta0=1.0)
        trajectory, constants, suite = _stable_run(mdp, features, schedule, t_end=5.0, dt=0.01, n_outputs=50)
        report = suite.run(trajectory)
        assert report.get('gronwall_kl_integral').status == NOT_APPLICABLE
        assert report.get('critic_error_decay').status == NOT_APPLICABLE
        assert not report.has_failures

    def test_exact_critic_run_never_fails(self, make_random_mdp):
        mdp, features, _ = make_random_mdp(3, gamma=0.3)
        schedule = TimescaleSchedule(eta0=50.0)
        trajectory, _, suite = _stable_run(mdp, features, schedule, t_end=5.0, dt=0.01, n_outputs=50,
                                           critic_mode='exact')
        report = suite.run(trajectory)
        assert not report.has_failures
        assert report.get('value_derivative').status == PASS

    def test_unknown_group(self, one_hot_2x2):
        mdp, features = one_hot_2x2
        trajectory, _, suite = _stable_run(mdp, features, TimescaleSchedule(eta0=20.0), 0.5, 0.05, n_outputs=5)
        with pytest.raises(ValidationError):
            suite.run(trajectory, enabled=['lyapunov'])

    @pytest.mark.slow
    def test_exponential_schedule_rate(self):
        mdp, features, _ = sample_random_mdp(11, 3, 2, 0.3, 0.5)
        schedule = TimescaleSchedule(kind='exponential', eta0=20.0, k1=0.3)
        trajectory, constants, suite = _stable_run(mdp, features, schedule, t_end=40.0, dt=0.01, n_outputs=200)
        assert constants.eta0_admissible
        report = suite.run(trajectory, enabled=['convergence'], rate_window=(5.0, 40.0))
        assert report.get('exponential_rate').status == PASS
        assert report.get('exponential_envelope').status == PASS
        assert report.get('value_gap_envelope').status == PASS
        assert report.get('polynomial_rate').status == NOT_APPLICABLE

    @pytest.mark.slow
    def test_polynomial_schedule_slope(self):
        mdp, features, _ = sample_random_mdp(3, 1, 2, 0.005, 0.5)
        schedule = TimescaleSchedule(kind='polynomial', eta0=2.5, p=0.5)
        trajectory, constants, suite = _stable_run(mdp, features, schedule, t_end=200.0, dt=0.05, n_outputs=200)
        assert constants.convergence_small_gamma_flag
        report = suite.run(trajectory, enabled=['convergence'], rate_window=(20.0, 200.0))
        entry = report.get('polynomial_rate')
        assert entry.status == PASS
        assert -0.65 <= entry.details['rate_term_slope'] <= -0.35
        assert report.get('polynomial_envelope').status == PASS
