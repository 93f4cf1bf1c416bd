"""Tests for advantages, the mirror-descent step and the Fisher-Rao vector field."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from src.modules.mdp_model import policy_from_logits, sample_random_mdp, uniform_policy
from src.modules.exact_dp import evaluate_policy, solve_optimal, value_at
from src.modules.critic import best_parameters
from src.modules.actor import (
    approx_advantage,
    exact_advantage,
    exact_fisher_rao_rhs,
    fisher_rao_rhs,
    mirror_descent_step,
    policy_velocity,
)
from src.utils.errors import DimensionMismatch, ValidationError


def _instance(seed, structure='tabular-onehot'):
    rng = np.random.default_rng(seed)
    mdp, features, _ = sample_random_mdp(seed, 4, 3, 0.7, 0.5, structure)
    pi = policy_from_logits(rng.normal(size=(4, 3)), mdp.mu)
    return mdp, features, pi, rng


class TestAdvantage:

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_exact_advantage_is_centred(self, seed):
        mdp, _, pi, _ = _instance(seed)
        table = exact_advantage(pi, mdp)
        assert table.centered
        assert table.raw_residual <= 1e-10

    def test_realisable_critic_reproduces_exact_advantage(self):
        mdp, features, pi, _ = _instance(3, 'linear-mdp')
        theta_pi, _ = best_parameters(pi, mdp, features)
        assert_allclose(approx_advantage(theta_pi, pi, mdp, features).a, exact_advantage(pi, mdp).a, atol=1e-9)

    def test_optimal_policy_has_zero_advantage(self):
        mdp, _, _, _ = _instance(5)
        optimal = solve_optimal(mdp)
        assert np.max(np.abs(exact_advantage(optimal.policy, mdp).a)) <= 1e-8

    def test_approx_advantage_recentres(self):
        mdp, features, pi, rng = _instance(7)
        table = approx_advantage(rng.normal(size=features.dim), pi, mdp, features)
        assert_allclose(np.sum(table.a * pi.probs, axis=1), 0.0, atol=1e-12)


class TestMirrorDescent:

    @pytest.mark.parametrize('seed', range(5))
    def test_small_steps_follow_fisher_rao(self, seed):
        mdp, features, pi, rng = _instance(seed)
        theta = rng.normal(size=features.dim)
        advantage = approx_advantage(theta, pi, mdp, features)
        lam = 1e-6
        direction = (mirror_descent_step(pi, advantage, lam).log_density - pi.log_density) / lam
        assert_allclose(direction, fisher_rao_rhs(theta, pi, mdp, features), atol=1e-4)

    def test_step_keeps_normalisation(self):
        mdp, _, pi, _ = _instance(1)
        stepped = mirror_descent_step(pi, exact_advantage(pi, mdp), 5.0)
        assert stepped.normalisation_residual() <= 1e-10

    def test_invalid_step(self):
        mdp, _, pi, _ = _instance(1)
        with pytest.raises(ValidationError):
            mirror_descent_step(pi, exact_advantage(pi, mdp), 0.0)

    def test_shape_mismatch(self, two_cycle_mdp):
        mdp, _, pi, _ = _instance(1)
        with pytest.raises(DimensionMismatch):
            mirror_descent_step(uniform_policy(two_cycle_mdp), exact_advantage(pi, mdp), 0.1)


class TestVelocity:

    def test_density_velocity_is_tangent(self):
        mdp, features, pi, rng = _instance(2)
        velocity = policy_velocity(pi, fisher_rao_rhs(rng.normal(size=features.dim), pi, mdp, features))
        assert_allclose(velocity.sum(axis=1), 0.0, atol=1e-12)

    def test_exact_steps_decrease_value(self):
        mdp, _, pi, _ = _instance(4)
        stepped = mirror_descent_step(pi, exact_advantage(pi, mdp), 0.1)
        assert value_at(evaluate_policy(stepped, mdp), mdp.rho) <= value_at(evaluate_policy(pi, mdp), mdp.rho) + 1e-12
        assert_allclose(exact_fisher_rao_rhs(pi, mdp), -exact_advantage(pi, mdp).a)
