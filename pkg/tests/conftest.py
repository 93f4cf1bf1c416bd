"""Shared fixtures: hand-built MDPs with known answers and seeded random instances."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.modules.mdp_model import build_mdp, one_hot_features, sample_random_mdp

EXPERIMENTS_DIR = Path(__file__).parent.parent / 'config' / 'experiments'


@pytest.fixture
def single_point_mdp():
    """One state, two actions; V* = -tau ln sum_a mu(a) exp(-c(a)/tau) / (1 - gamma)."""
    return build_mdp(np.ones((1, 2, 1)), [[0.2, 0.7]], gamma=0.5, tau=0.5)


@pytest.fixture
def two_cycle_mdp():
    """Two states visited alternately whatever the action."""
    transition = np.zeros((2, 2, 2))
    transition[0, :, 1] = 1.0
    transition[1, :, 0] = 1.0
    return build_mdp(transition, [[0.0, 1.0], [0.5, 0.25]], gamma=0.6, tau=0.3)


@pytest.fixture
def make_random_mdp():
    """Factory for seeded random MDPs with their features."""
    def factory(seed, n_states=3, n_actions=2, gamma=0.7, tau=0.5, structure='tabular-onehot', feature_dim=None):
        mdp, features, spec = sample_random_mdp(seed, n_states, n_actions, gamma, tau, structure, feature_dim)
        return mdp, features, spec
    return factory


@pytest.fixture
def one_hot_2x2():
    """Small-discount 2x2 instance used for the uniform-boundedness regime."""
    rng = np.random.default_rng(2)
    mdp = build_mdp(rng.dirichlet(np.ones(2), size=(2, 2)), rng.uniform(0.0, 1.0, (2, 2)), gamma=0.01, tau=1.0)
    return mdp, one_hot_features(mdp)
