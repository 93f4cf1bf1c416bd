"""Stability and convergence certificates for actor-critic trajectories.

Every check recomputes both sides of its inequality from the raw snapshot
state (theta, l) and closed-form constants, and reports one of the statuses
pass, fail, expected-fail (inequality violated while a hypothesis is violated)
or not-applicable (hypothesis violated and the bound is undefined, or the check
does not concern the run's schedule).
"""

import math
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.integrate import cumulative_trapezoid

from ..utils.config import get_config
from ..utils.logger import get_logger
from ..utils.errors import InadmissibleEta, NotTangent, ValidationError
from .mdp_model import FeatureMap, FiniteMdp, Policy, kl_between, policy_from_logits
from .exact_dp import OptimalSolution, ValueFunctions, evaluate_policy, solve_optimal
from .occupancy import state_occupancy_kernel
from .critic import best_parameters, gram_data, project_onto_features, q_of_theta, semi_gradient
from .actor import approx_advantage, exact_advantage, policy_velocity
from .flow import TimescaleSchedule, Trajectory

PASS = 'pass'
FAIL = 'fail'
EXPECTED_FAIL = 'expected-fail'
NOT_APPLICABLE = 'not-applicable'

CHECK_GROUPS = ('lyapunov_drift', 'gronwall_kl', 'uniform_bounds', 'bounds_along_flow',
                'value_derivative', 'theta_pi_rate', 'convergence')

# exp(700) is still finite in float64
EXPONENT_CAP = 700.0


@dataclass(frozen=True)
class BoundConstants:
    """Constants of the stability and convergence statements.

    Fields that are undefined because eta0 is too small hold nan.
    """

    gamma_const: float
    lambda_beta: float
    gamma: float
    tau: float
    eta0: float
    c_inf: float
    C1: float
    theta0_norm: float
    sigma1: float
    sigma2: float
    a1: float
    a2: float
    small_gamma_flag: bool
    convergence_small_gamma_flag: bool
    eta0_stable: bool
    eta0_convergent: bool
    kl_bound_sq: float
    theta_radius: float
    theta0_error: float
    b1: float
    b2: float
    kl_star_initial: float

    @property
    def eta0_admissible(self) -> bool:
        return self.eta0_stable and self.eta0_convergent

    def consistency_errors(self) -> List[str]:
        """Flags recomputed from their defining inequalities; empty when consistent."""
        errors = []
        Gamma = self.gamma_const
        if self.eta0_stable != (self.eta0 > self.tau / Gamma):
            errors.append('eta0_stable')
        if self.eta0_convergent != (self.eta0 > 1.0 / Gamma):
            errors.append('eta0_convergent')
        if self.eta0_stable:
            denominator = Gamma ** 2 - Gamma * self.tau / self.eta0
            if self.small_gamma_flag != (64.0 * self.gamma ** 2 / denominator < 1.0):
                errors.append('small_gamma_flag')
            if self.small_gamma_flag and not self.a2 < self.tau:
                errors.append('a2<tau')
        return errors

    def to_dict(self) -> Dict[str, Any]:
        document = asdict(self)
        document['eta0_admissible'] = self.eta0_admissible
        return document


@dataclass
class CertificateEntry:
    name: str
    status: str
    margin: float
    t_worst: float
    hypotheses: Dict[str, bool] = field(default_factory=dict)
    constants_used: Dict[str, float] = field(default_factory=dict)
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def hypotheses_satisfied(self) -> bool:
        return all(self.hypotheses.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'status': self.status,
            'margin': self.margin,
            't_worst': self.t_worst,
            'hypotheses': dict(self.hypotheses),
            'constants_used': dict(self.constants_used),
            'details': dict(self.details),
        }


@dataclass
class CertificateReport:
    """Ordered certificate entries, at most one per name."""

    entries: List[CertificateEntry] = field(default_factory=list)

    def add(self, entry: CertificateEntry) -> None:
        if any(e.name == entry.name for e in self.entries):
            raise ValidationError(f"Duplicate certificate '{entry.name}'", 'unique-checks')
        self.entries.append(entry)

    def extend(self, entries: Iterable[CertificateEntry]) -> None:
        for entry in entries:
            self.add(entry)

    def get(self, name: str) -> Optional[CertificateEntry]:
        return next((e for e in self.entries if e.name == name), None)

    def counts(self) -> Dict[str, int]:
        counts = {PASS: 0, FAIL: 0, EXPECTED_FAIL: 0, NOT_APPLICABLE: 0}
        for entry in self.entries:
            counts[entry.status] += 1
        return counts

    @property
    def has_failures(self) -> bool:
        return any(e.status == FAIL for e in self.entries)

    def to_dict(self) -> Dict[str, Any]:
        return {'counts': self.counts(), 'checks': [e.to_dict() for e in self.entries]}


def exp_weighted_integrals(times: np.ndarray, values: np.ndarray, rate: float) -> np.ndarray:
    """I_k = int_{t_0}^{t_k} exp(-rate (t_k - r)) f(r) dr for piecewise-linear f.

    Uses the exact exponentially weighted trapezoid recursion
    I_{k+1} = e^{-rate h} I_k + w0 f_k + w1 f_{k+1}.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    integrals = np.zeros_like(values)
    for k in range(len(times) - 1):
        h = times[k + 1] - times[k]
        x = rate * h
        if abs(x) < 1e-3:
            w0 = h * (0.5 - x / 3.0 + x * x / 8.0)
            w1 = h * (0.5 - x / 6.0 + x * x / 24.0)
        else:
            one_minus_decay = -math.expm1(-x)
            w0 = (one_minus_decay - x * math.exp(-x)) / (rate * x)
            w1 = one_minus_decay / rate - w0
        integrals[k + 1] = math.exp(-x) * integrals[k] + w0 * values[k] + w1 * values[k + 1]
    return integrals


def gronwall_envelope(a1: float, a2: float, t: np.ndarray) -> np.ndarray:
    """Explicit envelope a1 exp(a2 t) for y <= a1 + a2 int e^{-tau(t-r)} y.

    Evaluated as exp(ln a1 + a2 t) with the exponent capped, so long horizons saturate
    at a large finite value instead of overflowing.
    """
    t = np.asarray(t, dtype=float)
    if a1 <= 0.0:
        return np.zeros_like(t)
    return np.exp(np.minimum(math.log(a1) + a2 * t, EXPONENT_CAP))


def gronwall_resolvent(a1: float, a2: float, tau: float, t: np.ndarray) -> np.ndarray:
    """Solution of y = a1 + a2 int_0^t e^{-tau(t-r)} y dr, the sharpest Gronwall bound.

    y solves y' = (a2 - tau) y + tau a1 with y(0) = a1.
    """
    t = np.asarray(t, dtype=float)
    rate = a2 - tau
    if rate == 0.0:
        return a1 * (1.0 + tau * t)
    return a1 * np.exp(rate * t) + tau * a1 * np.expm1(rate * t) / rate


def _critic_error_weight(tau: float) -> float:
    weight = get_config().get('analysis.critic_error_weight', 'inverse_tau')
    if weight == 'inverse_tau':
        return 1.0 / tau
    if weight == 'half_inverse_tau':
        return 1.0 / (2.0 * tau)
    return float(weight)


def compute_constants(mdp: FiniteMdp, features: FeatureMap, theta0: np.ndarray, pi0: Policy,
                      schedule: TimescaleSchedule, strict: bool = True,
                      optimal: Optional[OptimalSolution] = None) -> BoundConstants:
    """Compute every constant of the stability and convergence statements.

    Args:
        mdp: MDP
        features: Critic features
        theta0: Initial critic parameters
        pi0: Initial policy
        schedule: Timescale schedule providing eta0
        strict: Raise InadmissibleEta when eta0 <= tau/Gamma instead of reporting nan fields
        optimal: Pre-computed optimal solution

    Returns:
        BoundConstants

    Raises:
        InadmissibleEta: If strict and eta0 <= tau/Gamma
    """
    gram = gram_data(mdp, features)
    Gamma = gram.gamma_const
    gamma, tau, eta0 = mdp.gamma, mdp.tau, schedule.eta0
    theta0 = np.asarray(theta0, dtype=float)
    theta0_sq = float(theta0 @ theta0)
    c_inf = mdp.c_inf
    C1 = max(1.0, float(np.max(np.abs(pi0.log_density))))

    eta0_stable = eta0 > tau / Gamma
    if strict and not eta0_stable:
        raise InadmissibleEta(eta0, tau / Gamma)

    nan = float('nan')
    sigma1 = sigma2 = a1 = a2 = kl_bound_sq = theta_radius = nan
    small_gamma_flag = convergence_flag = False
    if eta0_stable:
        stability = 1.0 - tau / (Gamma * eta0)
        sigma1 = theta0_sq / (Gamma * eta0 * stability) + 2.0 * c_inf ** 2 / (Gamma ** 2 * tau * stability)
        sigma2 = 2.0 * tau ** 2 * gamma ** 2 / (Gamma ** 2 * stability)
        a1 = 8.0 * C1 ** 2 + 32.0 * sigma1 / tau
        a2 = 32.0 * sigma2 / tau
        denominator = Gamma ** 2 - Gamma * tau / eta0
        small_gamma_flag = 64.0 * gamma ** 2 / denominator < 1.0
        convergence_flag = 2.0 * math.sqrt(2.0) * gamma / math.sqrt(denominator) < 1.0
        if small_gamma_flag:
            kl_bound_sq = a1 * tau / (tau - a2)
            theta_radius = math.sqrt(max(theta0_sq, 2.0 * (c_inf ** 2 + tau ** 2 * gamma ** 2 * kl_bound_sq) / Gamma ** 2))

    values0 = evaluate_policy(pi0, mdp)
    theta_pi0, _ = best_parameters(pi0, mdp, features, values0)
    theta0_error = float(np.linalg.norm(theta0 - theta_pi0))
    b1 = b2 = nan
    critic_factor = 1.0 - tau / (2.0 * Gamma * eta0)
    if critic_factor > 0:
        b1 = theta0_error ** 2 / (Gamma * eta0 * critic_factor)
        b2 = 1.0 / (Gamma * critic_factor)

    optimal = optimal or solve_optimal(mdp)
    d_star_rho = mdp.rho @ state_occupancy_kernel(optimal.policy, mdp)
    kl_star_initial = float(d_star_rho @ kl_between(optimal.policy, pi0))

    return BoundConstants(
        gamma_const=Gamma, lambda_beta=gram.lambda_beta, gamma=gamma, tau=tau, eta0=eta0,
        c_inf=c_inf, C1=C1, theta0_norm=math.sqrt(theta0_sq), sigma1=sigma1, sigma2=sigma2,
        a1=a1, a2=a2, small_gamma_flag=small_gamma_flag, convergence_small_gamma_flag=convergence_flag,
        eta0_stable=eta0_stable, eta0_convergent=eta0 > 1.0 / Gamma,
        kl_bound_sq=kl_bound_sq, theta_radius=theta_radius, theta0_error=theta0_error,
        b1=b1, b2=b2, kl_star_initial=kl_star_initial,
    )


def dq_dt_oracle(pi: Policy, dpi_dt: np.ndarray, mdp: FiniteMdp, values: Optional[ValueFunctions] = None,
                 tol: float = 1e-10) -> np.ndarray:
    """dQ^pi/dt along a policy velocity dpi/dt.

    dQ(s,a) = gamma sum_s' P(s'|s,a) dV(s') with
    dV(s') = (1/(1-gamma)) sum_s'' d^pi(s''|s') sum_a A^pi_tau(s'',a) dpi(a|s'').

    Raises:
        NotTangent: If a row of dpi_dt does not sum to zero
    """
    velocity = np.asarray(dpi_dt, dtype=float)
    row_sums = np.abs(velocity.sum(axis=1))
    scale = max(1.0, float(np.max(np.abs(velocity))))
    if np.any(row_sums > tol * scale):
        raise NotTangent(f"Policy velocity rows must sum to 0, max |sum|={row_sums.max():.3e}")
    values = values if values is not None else evaluate_policy(pi, mdp)
    advantage = exact_advantage(pi, mdp, values).a
    inner = np.sum(advantage * velocity, axis=1)
    dv = state_occupancy_kernel(pi, mdp) @ inner / (1.0 - mdp.gamma)
    return mdp.gamma * mdp.expected_next(dv)


def dtheta_pi_dt(pi: Policy, dpi_dt: np.ndarray, mdp: FiniteMdp, features: FeatureMap,
                 values: Optional[ValueFunctions] = None) -> np.ndarray:
    """d theta_pi/dt = Sigma_beta^-1 int phi (dQ^pi/dt) dbeta."""
    return project_onto_features(dq_dt_oracle(pi, dpi_dt, mdp, values), mdp, features)


def dtheta_pi_bound(pi: Policy, dpi_dt: np.ndarray, mdp: FiniteMdp, lambda_beta: float,
                    values: Optional[ValueFunctions] = None) -> float:
    """(gamma/(lambda_beta(1-gamma))) |A^pi_tau|_inf max_s |dpi(.|s)|_TV, TV as the L1 norm."""
    advantage = exact_advantage(pi, mdp, values).a
    tv = float(np.max(np.sum(np.abs(dpi_dt), axis=1)))
    return mdp.gamma / (lambda_beta * (1.0 - mdp.gamma)) * float(np.max(np.abs(advantage))) * tv


def finite_difference_dq(pi: Policy, dlog_density: np.ndarray, mdp: FiniteMdp, h: float) -> np.ndarray:
    """Central difference of Q^pi when l moves along a centred direction dl."""
    plus = policy_from_logits(pi.log_density + h * dlog_density, pi.mu)
    minus = policy_from_logits(pi.log_density - h * dlog_density, pi.mu)
    return (evaluate_policy(plus, mdp).q - evaluate_policy(minus, mdp).q) / (2.0 * h)


@dataclass
class TrajectoryProfile:
    """Quantities recomputed from the raw snapshots of a trajectory."""

    times: np.ndarray
    eta: np.ndarray
    theta_norm: np.ndarray
    K: np.ndarray
    gap: np.ndarray
    min_gap: np.ndarray
    theta_err_sq: np.ndarray
    drift_lhs: np.ndarray
    q_theta_inf: np.ndarray
    q_exact_inf: np.ndarray
    log_density_inf: np.ndarray
    advantage_inf: np.ndarray
    exact_advantage_inf: np.ndarray
    velocity_tv: np.ndarray
    dtheta_pi_norm: np.ndarray
    dtheta_pi_bound: np.ndarray
    realisability: np.ndarray

    @property
    def realisable(self) -> bool:
        tol = get_config().get_float('tolerances.realisability', 1e-8)
        return bool(np.all(self.realisability <= tol))


def build_profile(trajectory: Trajectory, mdp: FiniteMdp, features: FeatureMap,
                  schedule: TimescaleSchedule, optimal: Optional[OptimalSolution] = None) -> TrajectoryProfile:
    """Recompute the certificate inputs from every snapshot's (theta, l)."""
    optimal = optimal or solve_optimal(mdp)
    v_star_rho = float(mdp.rho @ optimal.v)
    lambda_beta = features.lambda_beta
    rows: Dict[str, List[float]] = {name: [] for name in (
        'eta', 'theta_norm', 'K', 'gap', 'theta_err_sq', 'drift_lhs', 'q_theta_inf', 'q_exact_inf',
        'log_density_inf', 'advantage_inf', 'exact_advantage_inf', 'velocity_tv',
        'dtheta_pi_norm', 'dtheta_pi_bound', 'realisability')}

    for k, snapshot in enumerate(trajectory.snapshots):
        theta = snapshot.theta
        pi = trajectory.policy_at(k, mdp.mu)
        values = evaluate_policy(pi, mdp)
        theta_pi, residual = best_parameters(pi, mdp, features, values)
        exact = exact_advantage(pi, mdp, values).a
        if trajectory.critic_mode == 'exact':
            advantage = exact
        else:
            advantage = approx_advantage(theta, pi, mdp, features).a
        velocity = policy_velocity(pi, -advantage)
        error = theta - theta_pi

        rows['eta'].append(schedule.eta(snapshot.t))
        rows['theta_norm'].append(float(np.linalg.norm(theta)))
        rows['K'].append(pi.max_kl())
        rows['gap'].append(float(mdp.rho @ values.v) - v_star_rho)
        rows['theta_err_sq'].append(float(error @ error))
        rows['drift_lhs'].append(-float(theta @ semi_gradient(theta, pi, mdp, features)))
        rows['q_theta_inf'].append(float(np.max(np.abs(q_of_theta(theta, features)))))
        rows['q_exact_inf'].append(float(np.max(np.abs(values.q))))
        rows['log_density_inf'].append(float(np.max(np.abs(pi.log_density))))
        rows['advantage_inf'].append(float(np.max(np.abs(advantage))))
        rows['exact_advantage_inf'].append(float(np.max(np.abs(exact))))
        rows['velocity_tv'].append(float(np.max(np.sum(np.abs(velocity), axis=1))))
        rows['dtheta_pi_norm'].append(float(np.linalg.norm(dtheta_pi_dt(pi, velocity, mdp, features, values))))
        rows['dtheta_pi_bound'].append(dtheta_pi_bound(pi, velocity, mdp, lambda_beta, values))
        rows['realisability'].append(residual)

    arrays = {name: np.array(values, dtype=float) for name, values in rows.items()}
    return TrajectoryProfile(times=trajectory.times, min_gap=np.minimum.accumulate(arrays['gap']), **arrays)


def _status(holds: bool, hypotheses: Dict[str, bool]) -> str:
    if holds:
        return PASS
    return FAIL if all(hypotheses.values()) else EXPECTED_FAIL


def _inequality_entry(name: str, times: np.ndarray, lhs: np.ndarray, rhs: np.ndarray,
                      hypotheses: Dict[str, bool], constants_used: Dict[str, float],
                      slack: Optional[float] = None, mask: Optional[np.ndarray] = None,
                      details: Optional[Dict[str, Any]] = None) -> CertificateEntry:
    """Check lhs <= rhs pointwise with relative slack and record the worst snapshot."""
    slack = slack if slack is not None else get_config().get_float('analysis.slack', 1e-8)
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if mask is not None:
        times, lhs, rhs = times[mask], lhs[mask], rhs[mask]
    if lhs.size == 0:
        return CertificateEntry(name, NOT_APPLICABLE, math.nan, math.nan, hypotheses, constants_used,
                                dict(details or {}, reason='no snapshots in range'))
    margins = rhs - lhs
    scale = 1.0 + np.abs(rhs)
    finite = np.isfinite(rhs)
    with np.errstate(invalid='ignore'):
        normalised = np.where(finite, margins / scale, np.sign(margins))
        allowed = np.where(finite, slack * scale, 0.0)
    worst = int(np.nanargmin(normalised)) if np.any(np.isfinite(normalised)) else 0
    holds = bool(np.all(margins >= -allowed))
    entry = CertificateEntry(
        name=name,
        status=_status(holds, hypotheses),
        margin=float(margins[worst]),
        t_worst=float(times[worst]),
        hypotheses=hypotheses,
        constants_used=constants_used,
        details=dict(details or {}, lhs_worst=float(lhs[worst]), rhs_worst=float(rhs[worst]),
                     n_points=int(lhs.size)),
    )
    return entry


def _not_applicable(name: str, hypotheses: Dict[str, bool], reason: str) -> CertificateEntry:
    return CertificateEntry(name, NOT_APPLICABLE, math.nan, math.nan, hypotheses, {}, {'reason': reason})


def check_lyapunov_drift(trajectory: Trajectory, constants: BoundConstants, mdp: FiniteMdp,
                         features: FeatureMap, profile: Optional[TrajectoryProfile] = None) -> CertificateEntry:
    """(1/(2 eta)) d|theta|^2/dt <= -(Gamma/2)|theta|^2 + tau^2 gamma^2 K^2/Gamma + |c|^2/Gamma."""
    profile = profile or build_profile(trajectory, mdp, features, TimescaleSchedule(eta0=constants.eta0))
    Gamma = constants.gamma_const
    rhs = (-0.5 * Gamma * profile.theta_norm ** 2
           + (constants.tau * constants.gamma * profile.K) ** 2 / Gamma + constants.c_inf ** 2 / Gamma)
    return _inequality_entry('lyapunov_drift', profile.times, profile.drift_lhs, rhs,
                             {'features_bounded': True, 'gram_nonsingular': True},
                             {'gamma_const': Gamma, 'c_inf': constants.c_inf})


def _is_coupled_flow(trajectory: Trajectory) -> bool:
    return trajectory.critic_mode == 'semi-gradient' and trajectory.method != 'two-timescale'


def check_gronwall_kl(trajectory: Trajectory, constants: BoundConstants,
                      strict: bool = False) -> List[CertificateEntry]:
    """K_t^2 <= a1 + a2 int e^{-tau(t-r)} K_r^2 dr and K_t^2 <= a1 e^{a2 t}.

    Raises:
        InadmissibleEta: If strict and eta0 <= tau/Gamma
    """
    hypotheses = {'eta0>tau/Gamma': constants.eta0_stable, 'coupled_flow': _is_coupled_flow(trajectory)}
    if not constants.eta0_stable:
        if strict:
            raise InadmissibleEta(constants.eta0, constants.tau / constants.gamma_const)
        reason = 'eta0 <= tau/Gamma, constants undefined'
        return [_not_applicable('gronwall_kl_integral', hypotheses, reason),
                _not_applicable('gronwall_kl_envelope', hypotheses, reason)]

    times = trajectory.times
    k_sq = trajectory.column('K_t') ** 2
    used = {'a1': constants.a1, 'a2': constants.a2, 'tau': constants.tau}
    convolution = exp_weighted_integrals(times, k_sq, constants.tau)
    integral = _inequality_entry('gronwall_kl_integral', times, k_sq,
                                 constants.a1 + constants.a2 * convolution, hypotheses, used,
                                 slack=get_config().get_float('analysis.quadrature_slack', 1e-3))
    envelope = _inequality_entry('gronwall_kl_envelope', times, k_sq,
                                 gronwall_envelope(constants.a1, constants.a2, times - times[0]), hypotheses, used)
    return [integral, envelope]


def check_uniform_bounds(trajectory: Trajectory, constants: BoundConstants) -> List[CertificateEntry]:
    """sup K_t^2 <= a1 tau/(tau - a2) and sup |theta_t| <= R in the small-discount regime."""
    hypotheses = {'eta0>tau/Gamma': constants.eta0_stable, 'small_gamma': constants.small_gamma_flag,
                  'coupled_flow': _is_coupled_flow(trajectory)}
    if not (constants.eta0_stable and constants.small_gamma_flag):
        reason = 'small-discount condition fails'
        return [_not_applicable('uniform_kl_bound', hypotheses, reason),
                _not_applicable('uniform_theta_bound', hypotheses, reason)]

    times = trajectory.times
    kl = _inequality_entry('uniform_kl_bound', times, trajectory.column('K_t') ** 2,
                           np.full(len(times), constants.kl_bound_sq), hypotheses,
                           {'a1': constants.a1, 'a2': constants.a2, 'kl_bound_sq': constants.kl_bound_sq},
                           details={'resolvent_sup': float(np.max(gronwall_resolvent(
                               constants.a1, constants.a2, constants.tau, times - times[0])))})
    theta = _inequality_entry('uniform_theta_bound', times, trajectory.column('theta_norm'),
                              np.full(len(times), constants.theta_radius), hypotheses,
                              {'theta_radius': constants.theta_radius, 'gamma_const': constants.gamma_const})
    return [kl, theta]


def check_bounds_along_flow(trajectory: Trajectory, constants: BoundConstants,
                            profile: TrajectoryProfile) -> List[CertificateEntry]:
    """Pointwise bounds on the velocity, advantage, exact Q and log-density along the flow."""
    times = profile.times
    hypotheses = {'features_bounded': True}
    tau, gamma = constants.tau, constants.gamma
    sup_theta = np.maximum.accumulate(profile.theta_norm)
    sup_k = np.maximum.accumulate(profile.K)
    # the actor reads Q^pi itself when the critic is bypassed
    q_actor_inf = profile.q_exact_inf if trajectory.critic_mode == 'exact' else profile.q_theta_inf
    return [
        _inequality_entry('velocity_tv_bound', times, profile.velocity_tv, profile.advantage_inf,
                          hypotheses, {}),
        _inequality_entry('advantage_bound', times, profile.advantage_inf,
                          2.0 * q_actor_inf + 2.0 * tau * profile.log_density_inf, hypotheses,
                          {'tau': tau}),
        _inequality_entry('exact_value_bound', times, (1.0 - gamma) * profile.q_exact_inf,
                          constants.c_inf + tau * gamma * profile.K, hypotheses,
                          {'c_inf': constants.c_inf, 'tau': tau, 'gamma': gamma}),
        _inequality_entry('log_density_bound', times, profile.log_density_inf,
                          constants.C1 + (2.0 / tau) * sup_theta + sup_k,
                          dict(hypotheses, coupled_flow=_is_coupled_flow(trajectory)), {'C1': constants.C1}),
    ]


def value_derivative(trajectory: Trajectory, mdp: FiniteMdp, features: FeatureMap,
                     samples: Optional[int] = None, h: Optional[float] = None,
                     rel_tol: float = 1e-4) -> CertificateEntry:
    """Analytic dQ/dt against a central difference of Q along the flow's policy velocity."""
    config = get_config()
    samples = samples if samples is not None else int(config.get('analysis.derivative_samples', 5))
    h = h if h is not None else config.get_float('analysis.finite_difference_step', 1e-5)
    indices = np.unique(np.linspace(0, len(trajectory) - 1, samples).round().astype(int))

    errors, allowed, times = [], [], []
    for k in indices:
        snapshot = trajectory.snapshots[k]
        pi = trajectory.policy_at(k, mdp.mu)
        values = evaluate_policy(pi, mdp)
        if trajectory.critic_mode == 'exact':
            direction = -exact_advantage(pi, mdp, values).a
        else:
            direction = -approx_advantage(snapshot.theta, pi, mdp, features).a
        analytic = dq_dt_oracle(pi, policy_velocity(pi, direction), mdp, values)
        numeric = finite_difference_dq(pi, direction, mdp, h)
        scale = float(np.max(np.abs(analytic)))
        errors.append(float(np.max(np.abs(analytic - numeric))))
        allowed.append(rel_tol * scale + 1e-8 * (1.0 + float(np.max(np.abs(values.q)))))
        times.append(snapshot.t)
    return _inequality_entry('value_derivative', np.array(times), np.array(errors), np.array(allowed),
                             {'tangent_velocity': True}, {'h': h}, slack=0.0)


def theta_pi_rate(trajectory: Trajectory, constants: BoundConstants,
                  profile: TrajectoryProfile) -> CertificateEntry:
    """|d theta_pi/dt| <= (gamma/(lambda_beta(1-gamma))) |A|_inf max_s |dpi(.|s)|_TV at every snapshot."""
    return _inequality_entry('theta_pi_rate', profile.times, profile.dtheta_pi_norm,
                             profile.dtheta_pi_bound + 1e-8, {'gram_nonsingular': True},
                             {'lambda_beta': constants.lambda_beta, 'gamma': constants.gamma}, slack=0.0)


def _fit_slope(x: np.ndarray, y: np.ndarray) -> float:
    return float(stats.linregress(x, y).slope)


def check_convergence_envelopes(trajectory: Trajectory, constants: BoundConstants, mdp: FiniteMdp,
                                features: FeatureMap, schedule: TimescaleSchedule,
                                profile: TrajectoryProfile,
                                rate_window: Optional[Tuple[float, float]] = None) -> List[CertificateEntry]:
    """Value-gap envelope, critic-error decay and the schedule-specific convergence rates.

    Args:
        trajectory: Flow trajectory
        constants: Bound constants of the run
        mdp: MDP
        features: Critic features
        schedule: Timescale schedule of the run
        profile: Recomputed trajectory quantities
        rate_window: Time window for rate regressions; defaults to dropping the first
            analysis.transient_fraction of the horizon

    Returns:
        Entries value_gap_envelope, critic_error_decay, exponential_envelope,
        exponential_rate, polynomial_envelope and polynomial_rate
    """
    config = get_config()
    t_min = config.get_float('analysis.t_min', 0.1)
    gap_floor = config.get_float('analysis.gap_floor', 1e-10)
    quadrature_slack = config.get_float('analysis.quadrature_slack', 1e-3)
    tau, gamma = constants.tau, constants.gamma
    times = profile.times
    elapsed = times - times[0]
    weight = _critic_error_weight(tau)
    decay = np.exp(-0.5 * tau * elapsed)
    started = elapsed > 0
    prefactor = tau / (2.0 * (1.0 - gamma) * np.where(started, -np.expm1(-0.5 * tau * elapsed), 1.0))
    prefactor[~started] = np.nan
    late = elapsed >= t_min
    if rate_window is None:
        horizon = elapsed[-1] if len(elapsed) else 0.0
        rate_window = (config.get_float('analysis.transient_fraction', 0.2) * horizon, horizon)
    in_window = (elapsed >= rate_window[0] - 1e-12) & (elapsed <= rate_window[1] + 1e-12)

    realisable = profile.realisable
    continuous = trajectory.method != 'two-timescale'
    entries = []

    # Value gap against the critic-error convolution.
    critic_convolution = exp_weighted_integrals(times, profile.theta_err_sq, 0.5 * tau)
    gap_envelope = prefactor * (decay * constants.kl_star_initial + weight * critic_convolution)
    entries.append(_inequality_entry(
        'value_gap_envelope', times, profile.min_gap, gap_envelope,
        {'realisable': realisable, 'continuous_flow': continuous},
        {'kl_star_initial': constants.kl_star_initial, 'critic_error_weight': weight}, mask=late,
        slack=quadrature_slack))

    # Critic-error decay.
    critic_hypotheses = {'realisable': realisable, 'continuous_flow': continuous,
                         'eta0>1/Gamma': constants.eta0_convergent, 'tau<1': tau < 1.0}
    b_defined = np.isfinite(constants.b1) and np.isfinite(constants.b2)
    forcing = profile.dtheta_pi_norm ** 2 / profile.eta
    if b_defined:
        critic_rhs = constants.b1 * decay + constants.b2 * exp_weighted_integrals(times, forcing, 0.5 * tau)
        entries.append(_inequality_entry(
            'critic_error_decay', times, critic_convolution, critic_rhs, critic_hypotheses,
            {'b1': constants.b1, 'b2': constants.b2}, slack=quadrature_slack))
    else:
        entries.append(_not_applicable('critic_error_decay', critic_hypotheses, 'b1, b2 undefined for this eta0'))

    # Exponential schedule.
    exp_hypotheses = dict(critic_hypotheses, exponential_schedule=schedule.kind == 'exponential')
    if schedule.kind != 'exponential' or not b_defined:
        entries.append(_not_applicable('exponential_envelope', exp_hypotheses, 'schedule is not exponential'
                                       if schedule.kind != 'exponential' else 'b1, b2 undefined'))
        entries.append(_not_applicable('exponential_rate', exp_hypotheses, 'schedule is not exponential'))
    else:
        growth = np.exp(0.5 * tau * elapsed) * forcing
        k2 = constants.b1 + constants.b2 * cumulative_trapezoid(growth, elapsed, initial=0.0)
        envelope = prefactor * decay * (constants.kl_star_initial + weight * k2)
        entries.append(_inequality_entry(
            'exponential_envelope', times, profile.min_gap, envelope, exp_hypotheses,
            {'k2': float(k2[-1]), 'k1': schedule.k1}, mask=late, slack=quadrature_slack))
        entries.append(_rate_entry(profile, elapsed, in_window, gap_floor, tau, exp_hypotheses, rate_window))

    # Polynomial schedule in the small-discount regime.
    poly_hypotheses = dict(critic_hypotheses, small_gamma=constants.convergence_small_gamma_flag,
                           polynomial_schedule=schedule.kind == 'polynomial')
    if schedule.kind != 'polynomial' or not b_defined:
        reason = 'schedule is not polynomial' if schedule.kind != 'polynomial' else 'b1, b2 undefined'
        entries.append(_not_applicable('polynomial_envelope', poly_hypotheses, reason))
        entries.append(_not_applicable('polynomial_rate', poly_hypotheses, reason))
    else:
        d1 = weight * constants.b2 * float(np.max(profile.dtheta_pi_norm ** 2))
        inverse_eta = exp_weighted_integrals(times, 1.0 / profile.eta, 0.5 * tau)
        envelope = prefactor * (decay * (constants.kl_star_initial + weight * constants.b1) + d1 * inverse_eta)
        entries.append(_inequality_entry(
            'polynomial_envelope', times, profile.min_gap, envelope, poly_hypotheses, {'d1': d1}, mask=late,
            slack=quadrature_slack))

        window = in_window & late
        if np.count_nonzero(window) < 3:
            entries.append(_not_applicable('polynomial_rate', poly_hypotheses, 'fewer than 3 points in window'))
        else:
            entries.append(_polynomial_rate_entry(profile, elapsed, window, gap_floor, prefactor * inverse_eta,
                                                  schedule.p, d1, poly_hypotheses, rate_window))
    return entries


def _rate_entry(profile: TrajectoryProfile, elapsed: np.ndarray, in_window: np.ndarray, gap_floor: float,
                tau: float, hypotheses: Dict[str, bool], rate_window: Tuple[float, float]) -> CertificateEntry:
    """Fitted log-linear decay rate of the running minimum gap against tau/2 - 0.05."""
    required = 0.5 * tau - 0.05
    usable = in_window & (profile.min_gap > gap_floor)
    details = {'window': list(rate_window), 'required_rate': required, 'n_points': int(np.count_nonzero(usable))}
    if np.count_nonzero(in_window) and not np.any(usable):
        return CertificateEntry('exponential_rate', PASS, math.inf, float(profile.times[in_window][0]),
                                hypotheses, {'tau': tau}, dict(details, reason='gap below floor in window'))
    if np.count_nonzero(usable) < 3:
        return _not_applicable('exponential_rate', hypotheses, 'fewer than 3 points above the gap floor')
    rate = -_fit_slope(elapsed[usable], np.log(profile.min_gap[usable]))
    margin = rate - required
    return CertificateEntry('exponential_rate', _status(margin >= 0, hypotheses), margin,
                            float(profile.times[usable][-1]), hypotheses, {'tau': tau},
                            dict(details, fitted_rate=rate))


def _polynomial_rate_entry(profile: TrajectoryProfile, elapsed: np.ndarray, window: np.ndarray, gap_floor: float,
                           rate_term: np.ndarray, p: float, d1: float, hypotheses: Dict[str, bool],
                           rate_window: Tuple[float, float]) -> CertificateEntry:
    """Log-log slopes of the 1/eta envelope term and of the running minimum gap against -p.

    The 1/eta term must decay like t^-p within 0.15. The observed gap must decay at least as
    fast as t^(-p + 0.15) unless it already sits below the gap floor in the window.
    """
    tolerance = 0.15
    expected = -p
    rate_slope = _fit_slope(np.log(elapsed[window]), np.log(rate_term[window]))
    rate_margin = tolerance - abs(rate_slope - expected)

    usable = window & (profile.min_gap > gap_floor)
    details = {'rate_term_slope': rate_slope, 'expected_slope': expected, 'window': list(rate_window),
               'n_gap_points': int(np.count_nonzero(usable))}
    if np.count_nonzero(usable) < 3:
        observed, gap_margin = math.nan, math.inf
        details['reason'] = ('gap below floor in window' if not np.any(usable)
                             else 'fewer than 3 gap points above the floor')
    else:
        observed = _fit_slope(np.log(elapsed[usable]), np.log(profile.min_gap[usable]))
        gap_margin = expected + tolerance - observed
    details['observed_gap_slope'] = observed

    margin = min(rate_margin, gap_margin)
    return CertificateEntry('polynomial_rate', _status(margin >= 0, hypotheses), margin,
                            float(profile.times[window][-1]), hypotheses, {'p': p, 'd1': d1}, details)


class CertificateSuite:
    """Runs the enabled certificate groups on one trajectory."""

    def __init__(self, mdp: FiniteMdp, features: FeatureMap, schedule: TimescaleSchedule,
                 constants: BoundConstants, optimal: Optional[OptimalSolution] = None):
        self.config = get_config()
        self.logger = get_logger(__name__)
        self.mdp = mdp
        self.features = features
        self.schedule = schedule
        self.constants = constants
        self.optimal = optimal or solve_optimal(mdp)

    def run(self, trajectory: Trajectory, enabled: Optional[Sequence[str]] = None,
            rate_window: Optional[Tuple[float, float]] = None) -> CertificateReport:
        """Run certificate groups.

        Args:
            trajectory: Trajectory to certify
            enabled: Check groups to run (defaults to all of CHECK_GROUPS)
            rate_window: Regression window for rate checks

        Returns:
            CertificateReport
        """
        enabled = list(enabled) if enabled is not None else list(CHECK_GROUPS)
        unknown = [name for name in enabled if name not in CHECK_GROUPS]
        if unknown:
            raise ValidationError(f"Unknown certificate groups: {', '.join(unknown)}", 'certificates')

        report = CertificateReport()
        if len(trajectory) == 0:
            return report
        profile = build_profile(trajectory, self.mdp, self.features, self.schedule, self.optimal)
        if self.constants.consistency_errors():
            raise ValidationError(f"Inconsistent constants: {self.constants.consistency_errors()}",
                                  'constants-consistency')

        for group in enabled:
            if group == 'lyapunov_drift':
                report.add(check_lyapunov_drift(trajectory, self.constants, self.mdp, self.features, profile))
            elif group == 'gronwall_kl':
                report.extend(check_gronwall_kl(trajectory, self.constants))
            elif group == 'uniform_bounds':
                report.extend(check_uniform_bounds(trajectory, self.constants))
            elif group == 'bounds_along_flow':
                report.extend(check_bounds_along_flow(trajectory, self.constants, profile))
            elif group == 'value_derivative':
                report.add(value_derivative(trajectory, self.mdp, self.features))
            elif group == 'theta_pi_rate':
                report.add(theta_pi_rate(trajectory, self.constants, profile))
            elif group == 'convergence':
                report.extend(check_convergence_envelopes(trajectory, self.constants, self.mdp, self.features,
                                                          self.schedule, profile, rate_window))

        for entry in report.entries:
            if entry.status == FAIL:
                self.logger.warning(f"Certificate {entry.name} failed: margin {entry.margin:.3e} at t={entry.t_worst}")
        self.logger.info(f"Certificates: {report.counts()}")
        return report
