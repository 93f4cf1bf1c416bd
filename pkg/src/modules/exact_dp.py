"""Exact soft dynamic programming: policy evaluation, optimal quantities, performance difference."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from ..utils.config import get_config
from ..utils.logger import get_logger
from ..utils.errors import DimensionMismatch, NonConvergence, SolveFailure, ValidationError
from .mdp_model import FiniteMdp, Policy, kl_between, policy_from_logits
from .occupancy import state_occupancy_kernel

logger = get_logger(__name__)


@dataclass(frozen=True)
class ValueFunctions:
    """Regularised value functions of one policy."""

    q: np.ndarray
    v: np.ndarray
    kl: np.ndarray
    policy: Policy


@dataclass(frozen=True)
class OptimalSolution:
    q: np.ndarray
    v: np.ndarray
    policy: Policy
    iterations: int
    residual: float


@dataclass(frozen=True)
class PerformanceDifference:
    """Both sides of the performance-difference identity at rho.

    Attributes:
        lhs: V^pi(rho) - V^pi'(rho) from two evaluations
        rhs: Occupancy-weighted integral of the advantage-like integrand
        per_state: Contribution of every state to rhs
    """

    lhs: float
    rhs: float
    per_state: np.ndarray


def _check_table(f: np.ndarray, mdp: FiniteMdp) -> np.ndarray:
    table = np.asarray(f, dtype=float)
    if table.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionMismatch(f"Expected a {(mdp.n_states, mdp.n_actions)} table, got {table.shape}", 'table-shape')
    return table


def regularised_cost(pi: Policy, mdp: FiniteMdp) -> np.ndarray:
    """c + tau gamma E_P[KL(pi|mu)], the constant part of the Bellman operator."""
    return mdp.cost + mdp.tau * mdp.gamma * mdp.expected_next(pi.kl_to_reference())


def state_values(q: np.ndarray, pi: Policy, tau: float) -> np.ndarray:
    """V(s) = sum_a (Q(s,a) + tau l(s,a)) pi(a|s)."""
    return np.sum((q + tau * pi.log_density) * pi.probs, axis=1)


def bellman_apply(f: np.ndarray, pi: Policy, mdp: FiniteMdp) -> np.ndarray:
    """Soft Bellman operator T^pi f = c + gamma E_{P^pi}[f] + tau gamma E_P[KL(pi|mu)]."""
    table = _check_table(f, mdp)
    next_values = np.sum(table * pi.probs, axis=1)
    return regularised_cost(pi, mdp) + mdp.gamma * mdp.expected_next(next_values)


def bellman_residual(q: np.ndarray, pi: Policy, mdp: FiniteMdp) -> float:
    return float(np.max(np.abs(bellman_apply(q, pi, mdp) - q)))


def evaluate_policy(pi: Policy, mdp: FiniteMdp, tol: Optional[float] = None, method: Optional[str] = None,
                    max_iterations: Optional[int] = None) -> ValueFunctions:
    """Evaluate Q^pi_tau and V^pi_tau.

    Args:
        pi: Policy to evaluate
        mdp: MDP
        tol: Sup-norm Bellman residual target relative to max(1, |Q|_inf) (defaults to
            tolerances.fixed_point)
        method: 'linear' solves (I - gamma P^pi) Q = c + tau gamma P KL, 'iterative' applies T^pi
            (defaults to solver.method)
        max_iterations: Iteration budget for the iterative method

    Returns:
        ValueFunctions with Bellman residual <= tol * max(1, |Q|_inf)

    Raises:
        SolveFailure: If the linear system is singular or the scaled residual stays above tol
        NonConvergence: If iteration exhausts its budget
    """
    config = get_config()
    tol = tol if tol is not None else config.get_float('tolerances.fixed_point', 1e-10)
    method = method or config.get('solver.method', 'linear')
    if tol <= 0:
        raise ValidationError(f"Tolerance must be positive, got {tol}", 'tol>0')

    if method == 'linear':
        system = np.eye(mdp.n_pairs) - mdp.gamma * mdp.sa_kernel(pi)
        rhs = regularised_cost(pi, mdp).ravel()
        try:
            q = scipy.linalg.solve(system, rhs)
            # One step of iterative refinement recovers digits lost to conditioning.
            q = q + scipy.linalg.solve(system, rhs - system @ q)
        except (np.linalg.LinAlgError, ValueError) as e:
            raise SolveFailure(f"Policy evaluation system is singular: {e}") from e
        q = q.reshape(mdp.n_states, mdp.n_actions)
        residual = bellman_residual(q, pi, mdp)
        scale = max(1.0, float(np.max(np.abs(q))))
        if not np.isfinite(residual) or residual > tol * scale:
            raise SolveFailure(f"Policy evaluation residual {residual:.3e} exceeds tolerance {tol:.1e}")
    elif method == 'iterative':
        if max_iterations is None:
            max_iterations = int(config.get('solver.max_iterations', 100000))
        q = np.zeros((mdp.n_states, mdp.n_actions))
        for iteration in range(1, max_iterations + 1):
            q_next = bellman_apply(q, pi, mdp)
            step = float(np.max(np.abs(q_next - q)))
            q = q_next
            if step <= tol:
                logger.debug(f"Policy evaluation converged in {iteration} iterations")
                break
        else:
            raise NonConvergence(f"Policy evaluation did not reach {tol:.1e} in {max_iterations} iterations")
    else:
        raise ValidationError(f"Unknown evaluation method '{method}'", 'method')

    return ValueFunctions(q=q, v=state_values(q, pi, mdp.tau), kl=pi.kl_to_reference(), policy=pi)


def soft_minimum(q: np.ndarray, mdp: FiniteMdp) -> np.ndarray:
    """V(s) = -tau ln sum_a exp(-Q(s,a)/tau) mu(a), evaluated in log domain."""
    return -mdp.tau * logsumexp(-q / mdp.tau + mdp.log_mu[None, :], axis=1)


def soft_bellman_optimal_apply(q: np.ndarray, mdp: FiniteMdp) -> np.ndarray:
    """Optimal soft Bellman operator Q -> c + gamma E_P[soft_minimum(Q)]."""
    return mdp.cost + mdp.gamma * mdp.expected_next(soft_minimum(_check_table(q, mdp), mdp))


def greedy_policy(q: np.ndarray, mdp: FiniteMdp) -> Policy:
    """pi(a|s) proportional to exp(-Q(s,a)/tau) mu(a)."""
    return policy_from_logits(-np.asarray(q) / mdp.tau, mdp.mu)


def solve_optimal(mdp: FiniteMdp, tol: Optional[float] = None,
                  max_iterations: Optional[int] = None) -> OptimalSolution:
    """Soft value iteration followed by one exact evaluation of the greedy policy.

    Args:
        mdp: MDP
        tol: Fixed-point residual target (defaults to tolerances.fixed_point)
        max_iterations: Iteration budget (defaults to solver.max_iterations)

    Returns:
        OptimalSolution with q_star, v_star and pi_star

    Raises:
        NonConvergence: If the residual does not fall below tol within the budget
    """
    config = get_config()
    tol = tol if tol is not None else config.get_float('tolerances.fixed_point', 1e-10)
    if max_iterations is None:
        max_iterations = int(config.get('solver.max_iterations', 100000))
    if tol <= 0:
        raise ValidationError(f"Tolerance must be positive, got {tol}", 'tol>0')

    q = np.zeros((mdp.n_states, mdp.n_actions))
    iterations = 0
    residual = float('inf')
    while iterations < max_iterations:
        q_next = soft_bellman_optimal_apply(q, mdp)
        residual = float(np.max(np.abs(q_next - q)))
        q = q_next
        iterations += 1
        if residual <= tol:
            break
    else:
        raise NonConvergence(f"Soft value iteration residual {residual:.3e} after {max_iterations} iterations")

    # Polishing with the greedy policy's exact Q is a soft policy-iteration step.
    polished = evaluate_policy(greedy_policy(q, mdp), mdp, tol=tol).q
    polished_residual = float(np.max(np.abs(soft_bellman_optimal_apply(polished, mdp) - polished)))
    if polished_residual <= residual:
        q, residual = polished, polished_residual

    logger.debug(f"Soft value iteration: {iterations} iterations, residual {residual:.3e}")
    return OptimalSolution(q=q, v=soft_minimum(q, mdp), policy=greedy_policy(q, mdp),
                           iterations=iterations, residual=residual)


def value_at(values: ValueFunctions, rho: np.ndarray) -> float:
    """V(rho) = sum_s rho(s) V(s)."""
    return float(np.dot(rho, values.v))


def performance_difference(pi: Policy, pi_prime: Policy, mdp: FiniteMdp) -> PerformanceDifference:
    """Evaluate both sides of the performance-difference identity.

    The right-hand side is
    (1/(1-gamma)) sum_s d^pi_rho(s) [sum_a (Q^pi' + tau l')(pi - pi') + tau KL(pi|pi')](s).
    """
    values = evaluate_policy(pi, mdp)
    values_prime = evaluate_policy(pi_prime, mdp)
    lhs = value_at(values, mdp.rho) - value_at(values_prime, mdp.rho)

    shifted = values_prime.q + mdp.tau * pi_prime.log_density
    integrand = np.sum(shifted * (pi.probs - pi_prime.probs), axis=1) + mdp.tau * kl_between(pi, pi_prime)
    d_rho = mdp.rho @ state_occupancy_kernel(pi, mdp)
    per_state = d_rho * integrand / (1.0 - mdp.gamma)
    return PerformanceDifference(lhs=lhs, rhs=float(per_state.sum()), per_state=per_state)
