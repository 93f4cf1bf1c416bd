"""Linear critic Q(s,a;theta) = <theta, phi(s,a)>: MSBE, semi-gradient and best parameters."""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from ..utils.config import get_config
from ..utils.logger import get_logger
from ..utils.errors import DimensionMismatch, NotRealisable, SingularGram, ValidationError
from .mdp_model import FeatureMap, FiniteMdp, Policy, gram_matrix
from .exact_dp import ValueFunctions, evaluate_policy, regularised_cost
from .occupancy import sa_occupancy

logger = get_logger(__name__)


@dataclass(frozen=True)
class CriticState:
    theta: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.theta)):
            raise ValidationError("Critic parameters must be finite", 'finite-theta')


@dataclass(frozen=True)
class GramData:
    """Gram matrix under beta, its smallest eigenvalue and Gamma = lambda_beta (1-gamma)(1-sqrt(gamma))."""

    sigma_beta: np.ndarray
    lambda_beta: float
    gamma_const: float


@dataclass(frozen=True)
class CriticSystem:
    """Semi-gradient as an affine map g(theta) = matrix @ theta - offset for a frozen policy."""

    matrix: np.ndarray
    offset: np.ndarray

    def semi_gradient(self, theta: np.ndarray) -> np.ndarray:
        return self.matrix @ theta - self.offset

    def fixed_point(self) -> np.ndarray:
        return scipy.linalg.solve(self.matrix, self.offset)


def _check_theta(theta: np.ndarray, features: FeatureMap) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (features.dim,):
        raise DimensionMismatch(f"theta must have shape ({features.dim},), got {theta.shape}", 'theta-shape')
    return theta


def q_of_theta(theta: np.ndarray, features: FeatureMap) -> np.ndarray:
    """Q(s, a; theta) as an (S, A) table."""
    theta = _check_theta(theta, features)
    return (features.phi @ theta).reshape(features.n_states, features.n_actions)


def bellman_error(theta: np.ndarray, pi: Policy, mdp: FiniteMdp, features: FeatureMap) -> np.ndarray:
    """Q_theta - T^pi Q_theta as a flat |S||A| vector."""
    q = q_of_theta(theta, features).ravel()
    return (q - mdp.gamma * mdp.sa_kernel(pi) @ q - regularised_cost(pi, mdp).ravel())


def msbe(theta: np.ndarray, pi: Policy, mdp: FiniteMdp, features: FeatureMap,
         occupancy: Optional[np.ndarray] = None) -> float:
    """(1/2) int (Q_theta - T^pi Q_theta)^2 d^pi_beta."""
    d = sa_occupancy(pi, mdp) if occupancy is None else occupancy
    error = bellman_error(theta, pi, mdp, features)
    return float(0.5 * np.sum(d.ravel() * error ** 2))


def semi_gradient(theta: np.ndarray, pi: Policy, mdp: FiniteMdp, features: FeatureMap,
                  occupancy: Optional[np.ndarray] = None) -> np.ndarray:
    """g(theta, pi) = int (Q_theta - T^pi Q_theta) phi d^pi_beta."""
    d = sa_occupancy(pi, mdp) if occupancy is None else occupancy
    return features.phi.T @ (d.ravel() * bellman_error(theta, pi, mdp, features))


def critic_linear_system(pi: Policy, mdp: FiniteMdp, features: FeatureMap,
                         occupancy: Optional[np.ndarray] = None) -> CriticSystem:
    """Assemble M = Phi^T D (I - gamma P^pi) Phi and b = Phi^T D (c + tau gamma P KL), D = diag(d^pi_beta).

    The symmetric part of M dominates (1 - sqrt(gamma)) Sigma_{d^pi_beta}, so M is invertible.
    """
    d = (sa_occupancy(pi, mdp) if occupancy is None else occupancy).ravel()
    weighted = features.phi.T * d[None, :]
    transport = np.eye(mdp.n_pairs) - mdp.gamma * mdp.sa_kernel(pi)
    return CriticSystem(matrix=weighted @ transport @ features.phi,
                        offset=weighted @ regularised_cost(pi, mdp).ravel())


def squared_loss_and_grad(theta: np.ndarray, pi: Policy, mdp: FiniteMdp, features: FeatureMap,
                          zeta: Optional[np.ndarray] = None,
                          values: Optional[ValueFunctions] = None) -> Tuple[float, np.ndarray]:
    """L = (1/2) int (<theta, phi> - Q^pi_tau)^2 dzeta and its gradient.

    Args:
        theta: Critic parameters
        pi: Policy whose exact Q is the target
        mdp: MDP
        features: Feature map
        zeta: Weighting distribution over (s, a); defaults to beta
        values: Pre-computed evaluation of pi

    Returns:
        Tuple of (loss, gradient)
    """
    weights = (mdp.beta if zeta is None else np.asarray(zeta, dtype=float)).ravel()
    values = values if values is not None else evaluate_policy(pi, mdp)
    error = q_of_theta(theta, features).ravel() - values.q.ravel()
    return float(0.5 * np.sum(weights * error ** 2)), features.phi.T @ (weights * error)


def gram_data(mdp: FiniteMdp, features: FeatureMap, singular_tol: Optional[float] = None) -> GramData:
    """Sigma_beta, lambda_beta and Gamma.

    Raises:
        SingularGram: If lambda_beta <= singular_tol
    """
    singular_tol = singular_tol if singular_tol is not None else \
        get_config().get_float('tolerances.singular_gram', 1e-12)
    sigma = gram_matrix(features.phi, mdp.beta.ravel())
    lambda_beta = float(scipy.linalg.eigh(sigma, eigvals_only=True)[0])
    if lambda_beta <= singular_tol:
        raise SingularGram(f"Gram matrix under beta is singular: lambda_min={lambda_beta:.3e}")
    gamma_const = lambda_beta * (1.0 - mdp.gamma) * (1.0 - np.sqrt(mdp.gamma))
    return GramData(sigma_beta=sigma, lambda_beta=lambda_beta, gamma_const=float(gamma_const))


def project_onto_features(table: np.ndarray, mdp: FiniteMdp, features: FeatureMap) -> np.ndarray:
    """Sigma_beta^-1 int phi f dbeta, the beta-weighted least-squares fit of a table."""
    sigma = gram_matrix(features.phi, mdp.beta.ravel())
    try:
        factor = scipy.linalg.cho_factor(sigma)
    except np.linalg.LinAlgError as e:
        raise SingularGram(f"Gram matrix under beta is not positive definite: {e}") from e
    return scipy.linalg.cho_solve(factor, features.phi.T @ (mdp.beta.ravel() * np.ravel(table)))


def best_parameters(pi: Policy, mdp: FiniteMdp, features: FeatureMap,
                    values: Optional[ValueFunctions] = None) -> Tuple[np.ndarray, float]:
    """Best realisable parameters theta_pi and the realisability residual.

    Returns:
        Tuple of (theta_pi, max_{s,a} |<theta_pi, phi> - Q^pi_tau|)
    """
    values = values if values is not None else evaluate_policy(pi, mdp)
    theta_pi = project_onto_features(values.q, mdp, features)
    residual = float(np.max(np.abs(q_of_theta(theta_pi, features) - values.q)))
    return theta_pi, residual


def realisability_residual(pi: Policy, mdp: FiniteMdp, features: FeatureMap) -> float:
    return best_parameters(pi, mdp, features)[1]


def geometry_inequality_check(theta: np.ndarray, pi: Policy, mdp: FiniteMdp, features: FeatureMap,
                              tol: Optional[float] = None) -> Tuple[float, float]:
    """Both sides of -<g(theta,pi), theta - theta_pi> <= -(1-sqrt(gamma))(1-gamma) <grad L(theta,pi;beta), theta - theta_pi>.

    Raises:
        NotRealisable: If Q^pi_tau is not in the feature span within tol
    """
    tol = tol if tol is not None else get_config().get_float('tolerances.realisability', 1e-8)
    values = evaluate_policy(pi, mdp)
    theta_pi, residual = best_parameters(pi, mdp, features, values)
    if residual > tol:
        raise NotRealisable(f"Realisability residual {residual:.3e} exceeds {tol:.1e}")
    error = np.asarray(theta, dtype=float) - theta_pi
    _, grad = squared_loss_and_grad(theta, pi, mdp, features, values=values)
    lhs = -float(semi_gradient(theta, pi, mdp, features) @ error)
    rhs = -(1.0 - np.sqrt(mdp.gamma)) * (1.0 - mdp.gamma) * float(grad @ error)
    return lhs, rhs


def drift_precheck(theta: np.ndarray, pi: Policy, mdp: FiniteMdp, features: FeatureMap) -> Tuple[float, float]:
    """Both sides of -<g, theta> <= -(1-sqrt(gamma)) <theta, Sigma_{d^pi_beta} theta> + (|c| + tau gamma K)|theta|."""
    theta = _check_theta(theta, features)
    d = sa_occupancy(pi, mdp)
    lhs = -float(semi_gradient(theta, pi, mdp, features, d) @ theta)
    quadratic = float(theta @ gram_matrix(features.phi, d.ravel()) @ theta)
    forcing = mdp.c_inf + mdp.tau * mdp.gamma * pi.max_kl()
    rhs = -(1.0 - np.sqrt(mdp.gamma)) * quadratic + forcing * float(np.linalg.norm(theta))
    return lhs, rhs


def strong_convexity_modulus(pi: Policy, mdp: FiniteMdp, features: FeatureMap) -> float:
    """lambda_min of the Hessian Sigma_{d^pi_beta} of L(., pi; d^pi_beta)."""
    d = sa_occupancy(pi, mdp).ravel()
    return float(scipy.linalg.eigh(gram_matrix(features.phi, d), eigvals_only=True)[0])
