"""Actor: soft advantages, the pointwise mirror-descent update and the Fisher-Rao vector field."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..utils.config import get_config
from ..utils.errors import DimensionMismatch, ValidationError
from .mdp_model import FeatureMap, FiniteMdp, Policy, policy_from_logits
from .exact_dp import ValueFunctions, evaluate_policy
from .critic import q_of_theta


@dataclass(frozen=True)
class AdvantageTable:
    """Advantage A(s, a), re-centred so that sum_a A(s,a) pi(a|s) = 0.

    Attributes:
        a: Centred advantage table
        centered: Whether the centring residual is within tolerance
        raw_residual: Centring residual before the re-centring pass
    """

    a: np.ndarray
    centered: bool
    raw_residual: float


def _center(raw: np.ndarray, pi: Policy, tol: Optional[float] = None) -> AdvantageTable:
    tol = tol if tol is not None else get_config().get_float('tolerances.policy_normalisation', 1e-10)
    probs = pi.probs
    raw_residual = float(np.max(np.abs(np.sum(raw * probs, axis=1))))
    table = raw - np.sum(raw * probs, axis=1, keepdims=True)
    residual = float(np.max(np.abs(np.sum(table * probs, axis=1))))
    return AdvantageTable(a=table, centered=residual <= tol, raw_residual=raw_residual)


def exact_advantage(pi: Policy, mdp: FiniteMdp, values: Optional[ValueFunctions] = None) -> AdvantageTable:
    """A^pi_tau = Q^pi_tau + tau l - V^pi_tau."""
    values = values if values is not None else evaluate_policy(pi, mdp)
    raw = values.q + mdp.tau * pi.log_density - values.v[:, None]
    return _center(raw, pi)


def approx_advantage(theta: np.ndarray, pi: Policy, mdp: FiniteMdp, features: FeatureMap) -> AdvantageTable:
    """A(s, a; theta) = Q_theta + tau l - int (Q_theta + tau l) dpi."""
    return _center(q_of_theta(theta, features) + mdp.tau * pi.log_density, pi)


def mirror_descent_step(pi: Policy, advantage: AdvantageTable, lam: float) -> Policy:
    """KL-proximal update dpi_{n+1}/dpi_n proportional to exp(-lam A), in log domain.

    Args:
        pi: Current policy
        advantage: Advantage used for the step
        lam: Step size > 0

    Returns:
        Normalised next policy
    """
    if not lam > 0:
        raise ValidationError(f"Mirror-descent step must be positive, got {lam}", 'lambda>0')
    if advantage.a.shape != pi.log_density.shape:
        raise DimensionMismatch("Advantage and policy shapes differ", 'advantage-shape')
    return policy_from_logits(pi.log_density - lam * advantage.a, pi.mu)


def fisher_rao_rhs(theta: np.ndarray, pi: Policy, mdp: FiniteMdp, features: FeatureMap) -> np.ndarray:
    """dl/dt = -A(s, a; theta) for the approximate Fisher-Rao flow."""
    return -approx_advantage(theta, pi, mdp, features).a


def exact_fisher_rao_rhs(pi: Policy, mdp: FiniteMdp, values: Optional[ValueFunctions] = None) -> np.ndarray:
    """dl/dt = -A^pi_tau for the flow driven by the exact advantage."""
    return -exact_advantage(pi, mdp, values).a


def policy_velocity(pi: Policy, dlog_density: np.ndarray) -> np.ndarray:
    """Density form d pi/dt = (dl/dt) pi; rows sum to zero when dl/dt is centred."""
    return np.asarray(dlog_density) * pi.probs
