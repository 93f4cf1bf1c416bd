"""Finite entropy-regularised MDP model: environment, feature maps and policies.

State-action pairs are flattened row-major, so pair ``(s, a)`` lives at index
``s * n_actions + a`` in every |S||A|-sized vector, matrix and feature table.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from ..utils.config import get_config
from ..utils.logger import get_logger
from ..utils.errors import (
    BadDiscount,
    BadReferenceMeasure,
    DimensionMismatch,
    InfeasibleSpec,
    NonFiniteLogit,
    NonFullSupportBeta,
    NonStochasticRow,
    SingularGram,
    ValidationError,
)

logger = get_logger(__name__)

STRUCTURES = ('tabular-onehot', 'linear-mdp', 'dense-random')


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class FiniteMdp:
    """Validated finite MDP (S, A, P, c, gamma) with regulariser tau, reference mu and beta."""

    transition: np.ndarray
    cost: np.ndarray
    gamma: float
    tau: float
    mu: np.ndarray
    beta: np.ndarray

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions

    @property
    def rho(self) -> np.ndarray:
        """Initial state distribution, the action marginal of beta."""
        return self.beta.sum(axis=1)

    @property
    def log_mu(self) -> np.ndarray:
        return np.log(self.mu)

    @property
    def c_inf(self) -> float:
        return float(np.max(np.abs(self.cost)))

    @property
    def pair_transition(self) -> np.ndarray:
        """P reshaped to (|S||A|, |S|)."""
        return self.transition.reshape(self.n_pairs, self.n_states)

    def sa_kernel(self, policy: 'Policy') -> np.ndarray:
        """P^pi((s',a')|(s,a)) = P(s'|s,a) pi(a'|s') as a |S||A| square matrix."""
        kernel = self.pair_transition[:, :, None] * policy.probs[None, :, :]
        return kernel.reshape(self.n_pairs, self.n_pairs)

    def state_kernel(self, policy: 'Policy') -> np.ndarray:
        """P_pi(s'|s) = sum_a P(s'|s,a) pi(a|s)."""
        return np.einsum('sat,sa->st', self.transition, policy.probs)

    def expected_next(self, state_values: np.ndarray) -> np.ndarray:
        """(s, a) -> sum_s' P(s'|s,a) v(s')."""
        return self.transition @ state_values

    def kl_to_reference(self, policy: 'Policy') -> np.ndarray:
        return policy.kl_to_reference()

    def policy_probs(self, policy: 'Policy') -> np.ndarray:
        return policy.probs


@dataclass(frozen=True)
class FeatureMap:
    """Critic features phi(s, a) in R^N stored as a (|S||A|, N) table."""

    phi: np.ndarray
    n_states: int
    n_actions: int
    scale: float
    lambda_beta: float

    @property
    def dim(self) -> int:
        return self.phi.shape[1]

    def row(self, s: int, a: int) -> np.ndarray:
        return self.phi[s * self.n_actions + a]


@dataclass(frozen=True)
class Policy:
    """Policy in the class equivalent to mu, stored as l(s, a) = ln dpi/dmu."""

    log_density: np.ndarray
    mu: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_density) * self.mu[None, :]

    def kl_to_reference(self) -> np.ndarray:
        """KL(pi(.|s) | mu) for every state."""
        return np.sum(self.probs * self.log_density, axis=1)

    def max_kl(self) -> float:
        return float(np.max(self.kl_to_reference()))

    def normalisation_residual(self) -> float:
        return float(np.max(np.abs(self.probs.sum(axis=1) - 1.0)))


@dataclass(frozen=True)
class LinearMdpSpec:
    """Linear MDP parameters: c = <w, phi>, P(.|s,a) = sum_i phi_i(s,a) psi_i."""

    w: np.ndarray
    psi: np.ndarray


def _check_probability_vector(vec: np.ndarray, tol: float, error_cls, invariant: str,
                              indices: Optional[Tuple[int, ...]] = None) -> None:
    bad = np.flatnonzero(vec < 0)
    if bad.size:
        raise error_cls(f"Negative probability {vec[bad[0]]:.3g}", invariant,
                        (indices or ()) + (int(bad[0]),))
    total = vec.sum()
    if abs(total - 1.0) > tol:
        raise error_cls(f"Probabilities sum to {total:.15g}", invariant, indices)


def build_mdp(transition: Any, cost: Any, gamma: float, tau: float,
              mu: Optional[Any] = None, beta: Optional[Any] = None,
              tol: Optional[float] = None) -> FiniteMdp:
    """Validate raw arrays and build an immutable FiniteMdp.

    Args:
        transition: Array P[s][a][s']
        cost: Array c[s][a]
        gamma: Discount factor in (0, 1)
        tau: Regularisation weight > 0
        mu: Reference action measure; uniform when omitted
        beta: Initial state-action distribution; uniform when omitted
        tol: Probability tolerance (defaults to tolerances.probability)

    Returns:
        Validated FiniteMdp with exactly renormalised probability arrays

    Raises:
        DimensionMismatch, NonStochasticRow, BadReferenceMeasure,
        NonFullSupportBeta, BadDiscount, ValidationError
    """
    tol = tol if tol is not None else get_config().get_float('tolerances.probability', 1e-12)
    P = np.asarray(transition, dtype=float)
    c = np.asarray(cost, dtype=float)

    if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
        raise DimensionMismatch(f"Transition must have shape (S, A, S), got {P.shape}", 'transition-shape')
    n_states, n_actions = P.shape[0], P.shape[1]
    if c.shape != (n_states, n_actions):
        raise DimensionMismatch(f"Cost must have shape {(n_states, n_actions)}, got {c.shape}", 'cost-shape')
    if not np.all(np.isfinite(P)) or not np.all(np.isfinite(c)):
        raise ValidationError("Transition and cost must be finite", 'finite-inputs')

    for s in range(n_states):
        for a in range(n_actions):
            _check_probability_vector(P[s, a], tol, NonStochasticRow, 'transition rows sum to 1', (s, a))

    if not (0.0 < float(gamma) < 1.0):
        raise BadDiscount(f"Discount gamma={gamma} outside (0, 1)", '0<gamma<1')
    if not float(tau) > 0.0:
        raise ValidationError(f"Regulariser tau={tau} must be positive", 'tau>0')

    mu_arr = np.full(n_actions, 1.0 / n_actions) if mu is None else np.asarray(mu, dtype=float)
    if mu_arr.shape != (n_actions,):
        raise DimensionMismatch(f"mu must have shape ({n_actions},), got {mu_arr.shape}", 'mu-shape')
    _check_probability_vector(mu_arr, tol, BadReferenceMeasure, 'mu sums to 1')
    zero_mu = np.flatnonzero(mu_arr <= 0)
    if zero_mu.size:
        raise BadReferenceMeasure("Reference measure must have full support", 'mu>0', (int(zero_mu[0]),))

    if beta is None:
        beta_arr = np.full((n_states, n_actions), 1.0 / (n_states * n_actions))
    else:
        beta_arr = np.asarray(beta, dtype=float)
    if beta_arr.shape != (n_states, n_actions):
        raise DimensionMismatch(f"beta must have shape {(n_states, n_actions)}, got {beta_arr.shape}", 'beta-shape')
    zero_beta = np.argwhere(beta_arr <= 0)
    if zero_beta.size:
        raise NonFullSupportBeta("beta must have full support", 'beta>0', tuple(zero_beta[0]))
    _check_probability_vector(beta_arr.ravel(), tol, NonFullSupportBeta, 'beta sums to 1')

    P = P / P.sum(axis=2, keepdims=True)
    return FiniteMdp(
        transition=_frozen(P),
        cost=_frozen(c),
        gamma=float(gamma),
        tau=float(tau),
        mu=_frozen(mu_arr / mu_arr.sum()),
        beta=_frozen(beta_arr / beta_arr.sum()),
    )


def gram_matrix(phi: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_{(s,a)} w(s,a) phi(s,a) phi(s,a)^T for flattened weights."""
    gram = phi.T @ (weights.reshape(-1, 1) * phi)
    return 0.5 * (gram + gram.T)


def build_feature_map(phi: Any, mdp: FiniteMdp, singular_tol: Optional[float] = None) -> FeatureMap:
    """Validate a feature table, rescale to unit norm bound and check the Gram eigenvalue.

    Args:
        phi: Table of shape (|S||A|, N) or (|S|, |A|, N)
        mdp: MDP supplying beta
        singular_tol: Smallest admissible lambda_beta (defaults to tolerances.singular_gram)

    Returns:
        FeatureMap with every row norm <= 1

    Raises:
        DimensionMismatch, ValidationError, SingularGram
    """
    singular_tol = singular_tol if singular_tol is not None else \
        get_config().get_float('tolerances.singular_gram', 1e-12)
    table = np.asarray(phi, dtype=float)
    if table.ndim == 3:
        table = table.reshape(-1, table.shape[2])
    if table.ndim != 2 or table.shape[0] != mdp.n_pairs or table.shape[1] < 1:
        raise DimensionMismatch(f"Features must have {mdp.n_pairs} rows, got shape {table.shape}", 'feature-shape')
    if not np.all(np.isfinite(table)):
        raise ValidationError("Features must be finite", 'finite-features')

    max_norm = float(np.max(np.linalg.norm(table, axis=1)))
    scale = 1.0
    if max_norm > 1.0:
        scale = 1.0 / max_norm
        table = table * scale
        logger.debug(f"Rescaled features by {scale:.6g} to enforce the unit norm bound")

    eigenvalues = np.linalg.eigvalsh(gram_matrix(table, mdp.beta.ravel()))
    lambda_beta = float(eigenvalues[0])
    if lambda_beta <= singular_tol:
        raise SingularGram(f"Gram matrix under beta is singular: lambda_min={lambda_beta:.3e}")

    return FeatureMap(phi=_frozen(table), n_states=mdp.n_states, n_actions=mdp.n_actions,
                      scale=scale, lambda_beta=lambda_beta)


def one_hot_features(mdp: FiniteMdp) -> FeatureMap:
    """Tabular features: phi(s, a) is the indicator of the pair."""
    return build_feature_map(np.eye(mdp.n_pairs), mdp)


def policy_from_logits(f: Any, mu: np.ndarray) -> Policy:
    """Normalise logits against mu: l = f - logsumexp_a(f + ln mu).

    Args:
        f: Logit matrix over (s, a)
        mu: Reference action measure

    Returns:
        Policy with sum_a exp(l) mu = 1 in every state

    Raises:
        NonFiniteLogit: If any logit is not finite
    """
    logits = np.asarray(f, dtype=float)
    if logits.ndim != 2 or logits.shape[1] != len(mu):
        raise DimensionMismatch(f"Logits must have shape (S, {len(mu)}), got {logits.shape}", 'logit-shape')
    bad = np.argwhere(~np.isfinite(logits))
    if bad.size:
        raise NonFiniteLogit("Logits must be finite", 'finite-logits', tuple(bad[0]))
    log_mu = np.log(np.asarray(mu, dtype=float))
    log_density = logits - logsumexp(logits + log_mu[None, :], axis=1, keepdims=True)
    return Policy(log_density=_frozen(log_density), mu=_frozen(mu))


def uniform_policy(mdp: FiniteMdp) -> Policy:
    """The reference policy pi = mu."""
    return policy_from_logits(np.zeros((mdp.n_states, mdp.n_actions)), mdp.mu)


def kl_between(p: Policy, q: Policy) -> np.ndarray:
    """KL(p(.|s) | q(.|s)) for every state."""
    return np.sum(p.probs * (p.log_density - q.log_density), axis=1)


def linear_theta(spec: LinearMdpSpec, state_values: np.ndarray, gamma: float) -> np.ndarray:
    """Realising parameters of a linear MDP: theta_i = w_i + gamma <V, psi_i>."""
    return spec.w + gamma * spec.psi @ state_values


def linear_reconstruction_errors(spec: LinearMdpSpec, mdp: FiniteMdp, features: FeatureMap) -> Tuple[float, float]:
    """Max-norm errors of the cost and kernel rebuilt from (w, psi, phi)."""
    cost = (features.phi @ spec.w).reshape(mdp.n_states, mdp.n_actions)
    kernel = features.phi @ spec.psi
    return (float(np.max(np.abs(cost - mdp.cost))),
            float(np.max(np.abs(kernel - mdp.pair_transition))))


def _random_kernel(rng: np.random.Generator, n_states: int, n_actions: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))


def sample_random_mdp(seed: int, n_states: int, n_actions: int, gamma: float, tau: float,
                      structure: str = 'tabular-onehot', feature_dim: Optional[int] = None,
                      max_retries: Optional[int] = None
                      ) -> Tuple[FiniteMdp, FeatureMap, Optional[LinearMdpSpec]]:
    """Sample a seeded random MDP together with critic features.

    Args:
        seed: Seed fixing all randomness
        n_states: |S| >= 1
        n_actions: |A| >= 1
        gamma: Discount factor
        tau: Regularisation weight
        structure: One of tabular-onehot, linear-mdp, dense-random
        feature_dim: N for linear-mdp and dense-random structures
        max_retries: Attempts before giving up (defaults to generator.max_retries)

    Returns:
        Tuple of (mdp, features, linear spec or None)

    Raises:
        InfeasibleSpec: If no valid instance was produced within the retry budget
    """
    if structure not in STRUCTURES:
        raise ValidationError(f"Unknown structure '{structure}'", 'structure')
    if n_states < 1 or n_actions < 1:
        raise ValidationError("MDP sizes must be positive", 'sizes>=1')
    max_retries = max_retries if max_retries is not None else int(get_config().get('generator.max_retries', 50))
    rng = np.random.default_rng(seed)
    n_pairs = n_states * n_actions

    if structure == 'tabular-onehot':
        mdp = build_mdp(_random_kernel(rng, n_states, n_actions),
                        rng.uniform(0.0, 1.0, (n_states, n_actions)), gamma, tau)
        return mdp, one_hot_features(mdp), None

    if structure == 'linear-mdp':
        dim = feature_dim or min(n_pairs, max(1, n_states))
        for attempt in range(max_retries):
            phi = rng.dirichlet(np.ones(dim), size=n_pairs)
            psi = rng.dirichlet(np.ones(n_states), size=dim)
            w = rng.uniform(0.0, 1.0, dim)
            kernel = (phi @ psi).reshape(n_states, n_actions, n_states)
            try:
                mdp = build_mdp(kernel, (phi @ w).reshape(n_states, n_actions), gamma, tau)
                features = build_feature_map(phi, mdp, singular_tol=1e-8)
            except (NonStochasticRow, SingularGram) as e:
                logger.debug(f"Linear MDP attempt {attempt} rejected: {e}")
                continue
            spec = LinearMdpSpec(w=_frozen(w), psi=_frozen(psi))
            cost_err, kernel_err = linear_reconstruction_errors(spec, mdp, features)
            if max(cost_err, kernel_err) <= get_config().get_float('tolerances.identity', 1e-8):
                return mdp, features, spec
        raise InfeasibleSpec(f"No valid linear MDP after {max_retries} attempts", 'linear-mdp rows')

    dim = feature_dim or max(1, n_pairs // 2)
    mdp = build_mdp(_random_kernel(rng, n_states, n_actions),
                    rng.uniform(0.0, 1.0, (n_states, n_actions)), gamma, tau)
    for attempt in range(max_retries):
        try:
            return mdp, build_feature_map(rng.standard_normal((n_pairs, dim)), mdp, singular_tol=1e-8), None
        except SingularGram:
            logger.debug(f"Dense feature attempt {attempt} rejected: singular Gram")
    raise InfeasibleSpec(f"No non-singular dense features after {max_retries} attempts", 'dense-random gram')


def mdp_to_document(mdp: FiniteMdp, features: FeatureMap,
                    spec: Optional[LinearMdpSpec] = None) -> Dict[str, Any]:
    """Structured document form of an MDP and its features."""
    document = {
        'n_states': mdp.n_states,
        'n_actions': mdp.n_actions,
        'transition': mdp.transition.tolist(),
        'cost': mdp.cost.tolist(),
        'gamma': mdp.gamma,
        'tau': mdp.tau,
        'mu': mdp.mu.tolist(),
        'beta': mdp.beta.tolist(),
        'features': features.phi.tolist(),
    }
    if spec is not None:
        document['linear'] = {'w': spec.w.tolist(), 'psi': spec.psi.tolist()}
    return document


def save_mdp_file(path: Union[str, Path], mdp: FiniteMdp, features: FeatureMap,
                  spec: Optional[LinearMdpSpec] = None) -> Path:
    """Write the MDP description file (JSON)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(mdp_to_document(mdp, features, spec), f, indent=2)
        f.write('\n')
    logger.info(f"MDP description written to {path}")
    return path


def mdp_from_document(document: Dict[str, Any]
                      ) -> Tuple[FiniteMdp, FeatureMap, Optional[LinearMdpSpec]]:
    """Build and validate an MDP from its document form."""
    required = ('n_states', 'n_actions', 'transition', 'cost', 'gamma', 'tau', 'mu', 'beta', 'features')
    missing = [key for key in required if key not in document]
    if missing:
        raise ValidationError(f"MDP description is missing keys: {', '.join(missing)}", 'required-keys')

    n_states, n_actions = int(document['n_states']), int(document['n_actions'])
    transition = np.asarray(document['transition'], dtype=float)
    if transition.shape != (n_states, n_actions, n_states):
        raise DimensionMismatch(
            f"transition has shape {transition.shape}, expected {(n_states, n_actions, n_states)}",
            'transition-shape')
    mdp = build_mdp(transition, document['cost'], document['gamma'], document['tau'],
                    document['mu'], document['beta'])
    features = build_feature_map(document['features'], mdp)
    spec = None
    if 'linear' in document:
        spec = LinearMdpSpec(w=_frozen(document['linear']['w']), psi=_frozen(document['linear']['psi']))
    return mdp, features, spec


def load_mdp_file(path: Union[str, Path]) -> Tuple[FiniteMdp, FeatureMap, Optional[LinearMdpSpec]]:
    """Load and validate an MDP description file.

    Args:
        path: JSON file with keys n_states, n_actions, transition, cost, gamma,
            tau, mu, beta, features (and optionally linear)

    Returns:
        Tuple of (mdp, features, linear spec or None)
    """
    path = Path(path)
    with open(path, 'r', encoding='utf-8') as f:
        document = json.load(f)
    return mdp_from_document(document)
