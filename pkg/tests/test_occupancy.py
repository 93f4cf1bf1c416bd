"""Tests for occupancy kernels, the transport operator and the occupancy inequalities."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from src.modules.mdp_model import policy_from_logits, sample_random_mdp, uniform_policy
from src.modules.occupancy import (
    check_occupancy_identities,
    holder_integral_bound_check,
    j_apply,
    occupancy_gram_margin,
    occupancy_measures,
    occupancy_series,
    sa_occupancy,
    state_occupancy_kernel,
)
from src.utils.errors import DimensionMismatch


def _policy(mdp, rng):
    return policy_from_logits(rng.normal(scale=1.5, size=(mdp.n_states, mdp.n_actions)), mdp.mu)


class TestOccupancyMeasures:

    def test_probability_measures(self, make_random_mdp):
        mdp, _, _ = make_random_mdp(0, n_states=4, n_actions=3, gamma=0.9)
        bundle = occupancy_measures(_policy(mdp, np.random.default_rng(0)), mdp)
        assert bundle.d_sa.sum() == pytest.approx(1.0, abs=1e-12)
        assert_allclose(bundle.d_state.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(bundle.d_sa > 0)

    def test_series_oracle(self, make_random_mdp):
        mdp, _, _ = make_random_mdp(1, n_states=4, n_actions=2, gamma=0.5)
        pi = _policy(mdp, np.random.default_rng(1))
        series_sa, series_state = occupancy_series(pi, mdp, n_terms=200)
        assert_allclose(sa_occupancy(pi, mdp), series_sa, atol=1e-10)
        assert_allclose(state_occupancy_kernel(pi, mdp), series_state, atol=1e-10)

    def test_two_cycle_kernel(self, two_cycle_mdp):
        gamma = two_cycle_mdp.gamma
        d = state_occupancy_kernel(uniform_policy(two_cycle_mdp), two_cycle_mdp)
        stay = (1.0 - gamma) / (1.0 - gamma ** 2)
        assert_allclose(d, [[stay, gamma * stay], [gamma * stay, stay]], atol=1e-14)

    def test_bad_measure_shape(self, two_cycle_mdp):
        with pytest.raises(DimensionMismatch):
            sa_occupancy(uniform_policy(two_cycle_mdp), two_cycle_mdp, np.ones(3) / 3.0)


class TestIdentities:

    @pytest.mark.parametrize('seed', range(100))
    def test_transport_and_balance(self, seed):
        rng = np.random.default_rng(seed)
        mdp, _, _ = sample_random_mdp(seed, 3, 3, float(rng.uniform(0.05, 0.95)), 0.5)
        beta = rng.dirichlet(np.ones(mdp.n_pairs)).reshape(mdp.n_states, mdp.n_actions)
        residuals = check_occupancy_identities(_policy(mdp, rng), mdp, beta)
        assert residuals.transport <= 1e-10
        assert residuals.balance <= 1e-10

    def test_state_action_source_reproduces_state_occupancy(self, make_random_mdp):
        mdp, _, _ = make_random_mdp(2, n_states=4, n_actions=3)
        pi = _policy(mdp, np.random.default_rng(2))
        source = mdp.rho[:, None] * pi.probs
        expected = (mdp.rho @ state_occupancy_kernel(pi, mdp))[:, None] * pi.probs
        assert_allclose(sa_occupancy(pi, mdp, source), expected, atol=1e-10)

    def test_j_apply_preserves_mass(self, two_cycle_mdp):
        moved = j_apply(two_cycle_mdp.beta, uniform_policy(two_cycle_mdp), two_cycle_mdp)
        assert moved.sum() == pytest.approx(1.0)


class TestInequalities:

    @settings(max_examples=1000, deadline=None)
    @given(seed=st.integers(0, 10_000), gamma=st.floats(0.01, 0.99))
    def test_holder_integral_bound(self, seed, gamma):
        rng = np.random.default_rng(seed)
        mdp, _, _ = sample_random_mdp(seed, 3, 2, gamma, 1.0)
        f = rng.normal(size=mdp.n_pairs)
        lhs, rhs = holder_integral_bound_check(f, _policy(mdp, rng), mdp)
        assert lhs <= rhs + 1e-12

    @pytest.mark.parametrize('structure', ['tabular-onehot', 'linear-mdp', 'dense-random'])
    def test_occupancy_dominates_beta(self, structure):
        mdp, features, _ = sample_random_mdp(6, 3, 2, 0.6, 0.5, structure)
        margin = occupancy_gram_margin(_policy(mdp, np.random.default_rng(6)), mdp, features)
        assert margin >= -1e-12
