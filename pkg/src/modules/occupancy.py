"""Occupancy kernels and measures, the transport operator J_pi and their identities."""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from ..utils.logger import get_logger
from ..utils.errors import DimensionMismatch, SolveFailure
from .mdp_model import FeatureMap, FiniteMdp, Policy, gram_matrix

logger = get_logger(__name__)


@dataclass(frozen=True)
class OccupancyBundle:
    """Occupancy objects of one policy.

    Attributes:
        d_state: Row s holds the state-occupancy kernel d^pi(.|s)
        d_state_rho: State-occupancy measure started from rho
        d_sa: State-action occupancy measure started from beta, shape (S, A)
        policy: Policy the occupancies belong to
        beta: Source state-action distribution
    """

    d_state: np.ndarray
    d_state_rho: np.ndarray
    d_sa: np.ndarray
    policy: Policy
    beta: np.ndarray


@dataclass(frozen=True)
class OccupancyResiduals:
    """Max-norm residuals of the transport identity and the balance identity."""

    transport: float
    balance: float


def _as_sa_measure(beta_in: Optional[np.ndarray], mdp: FiniteMdp) -> np.ndarray:
    if beta_in is None:
        return np.asarray(mdp.beta)
    measure = np.asarray(beta_in, dtype=float)
    if measure.size != mdp.n_pairs:
        raise DimensionMismatch(f"Measure must have {mdp.n_pairs} entries, got {measure.size}", 'measure-shape')
    return measure.reshape(mdp.n_states, mdp.n_actions)


def _solve(matrix: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    try:
        return scipy.linalg.solve(matrix, rhs)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise SolveFailure(f"Linear solve for {what} failed: {e}") from e


def j_apply(beta_in: np.ndarray, pi: Policy, mdp: FiniteMdp) -> np.ndarray:
    """Transport a state-action measure one step: (J_pi beta)(s', a') = sum beta P(s'|s,a) pi(a'|s')."""
    measure = _as_sa_measure(beta_in, mdp)
    moved = measure.ravel() @ mdp.sa_kernel(pi)
    return moved.reshape(mdp.n_states, mdp.n_actions)


def sa_occupancy(pi: Policy, mdp: FiniteMdp, beta_in: Optional[np.ndarray] = None) -> np.ndarray:
    """d^pi_beta = (1 - gamma) sum_n gamma^n J^n beta, via one linear solve.

    Args:
        pi: Policy
        mdp: MDP
        beta_in: Source measure over (s, a); defaults to mdp.beta

    Returns:
        Occupancy measure of shape (S, A)
    """
    measure = _as_sa_measure(beta_in, mdp)
    system = np.eye(mdp.n_pairs) - mdp.gamma * mdp.sa_kernel(pi).T
    d = _solve(system, (1.0 - mdp.gamma) * measure.ravel(), 'state-action occupancy')
    return d.reshape(mdp.n_states, mdp.n_actions)


def state_occupancy_kernel(pi: Policy, mdp: FiniteMdp) -> np.ndarray:
    """d^pi(s'|s) = (1 - gamma) [(I - gamma P_pi)^-1](s, s'), all source states in one batched solve."""
    system = np.eye(mdp.n_states) - mdp.gamma * mdp.state_kernel(pi)
    return _solve(system, (1.0 - mdp.gamma) * np.eye(mdp.n_states), 'state occupancy kernel')


def occupancy_measures(pi: Policy, mdp: FiniteMdp) -> OccupancyBundle:
    """Compute every occupancy object of a policy."""
    d_state = state_occupancy_kernel(pi, mdp)
    return OccupancyBundle(
        d_state=d_state,
        d_state_rho=mdp.rho @ d_state,
        d_sa=sa_occupancy(pi, mdp),
        policy=pi,
        beta=np.asarray(mdp.beta),
    )


def occupancy_series(pi: Policy, mdp: FiniteMdp, beta_in: Optional[np.ndarray] = None,
                     n_terms: int = 200) -> Tuple[np.ndarray, np.ndarray]:
    """Truncated geometric series for (d^pi_beta, d^pi(.|.)), kept as an oracle.

    Truncation error in total variation is gamma^n_terms.
    """
    measure = _as_sa_measure(beta_in, mdp).ravel()
    sa_kernel = mdp.sa_kernel(pi)
    state_kernel = mdp.state_kernel(pi)

    d_sa = np.zeros(mdp.n_pairs)
    d_state = np.zeros((mdp.n_states, mdp.n_states))
    sa_term = measure.copy()
    state_term = np.eye(mdp.n_states)
    weight = 1.0 - mdp.gamma
    for _ in range(n_terms):
        d_sa += weight * sa_term
        d_state += weight * state_term
        sa_term = sa_term @ sa_kernel
        state_term = state_term @ state_kernel
        weight *= mdp.gamma
    return d_sa.reshape(mdp.n_states, mdp.n_actions), d_state


def check_occupancy_identities(pi: Policy, mdp: FiniteMdp,
                               beta_in: Optional[np.ndarray] = None) -> OccupancyResiduals:
    """Residuals of d^pi_{J beta} = J d^pi_beta and d^pi_beta - gamma d^pi_{J beta} = (1 - gamma) beta."""
    measure = _as_sa_measure(beta_in, mdp)
    d_beta = sa_occupancy(pi, mdp, measure)
    moved = j_apply(measure, pi, mdp)
    d_moved = sa_occupancy(pi, mdp, moved)

    transport = float(np.max(np.abs(d_moved - j_apply(d_beta, pi, mdp))))
    balance = float(np.max(np.abs(d_beta - mdp.gamma * d_moved - (1.0 - mdp.gamma) * measure)))
    logger.debug(f"Occupancy identity residuals: transport={transport:.3e}, balance={balance:.3e}")
    return OccupancyResiduals(transport=transport, balance=balance)


def holder_integral_bound_check(f: np.ndarray, pi: Policy, mdp: FiniteMdp) -> Tuple[float, float]:
    """Both sides of int f(x) (P^pi f)(x) d^pi_beta(dx) <= gamma^-1/2 int f^2 d^pi_beta.

    Args:
        f: Function table over (s, a)

    Returns:
        Tuple of (lhs, rhs)
    """
    values = np.asarray(f, dtype=float).ravel()
    if values.size != mdp.n_pairs:
        raise DimensionMismatch(f"Function table must have {mdp.n_pairs} entries", 'function-shape')
    d = sa_occupancy(pi, mdp).ravel()
    lhs = float(np.sum(d * values * (mdp.sa_kernel(pi) @ values)))
    rhs = float(np.sum(d * values ** 2) / np.sqrt(mdp.gamma))
    return lhs, rhs


def occupancy_gram_margin(pi: Policy, mdp: FiniteMdp, features: FeatureMap) -> float:
    """lambda_min(Sigma_{d^pi_beta} - (1 - gamma) Sigma_beta); non-negative up to round-off."""
    d = sa_occupancy(pi, mdp).ravel()
    difference = gram_matrix(features.phi, d) - (1.0 - mdp.gamma) * gram_matrix(features.phi, mdp.beta.ravel())
    return float(np.linalg.eigvalsh(difference)[0])
