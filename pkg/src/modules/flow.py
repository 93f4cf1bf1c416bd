"""Coupled actor-critic dynamics: timescale schedules, the continuous flow and the discrete scheme.

The actor state is integrated as an unnormalised log-density u with
du/dt = -(Q_theta + tau u); the policy is read out by per-state log-sum-exp
normalisation, which removes the state-constant gauge and leaves dl/dt = -A(.; theta).
"""

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from ..utils.config import get_config
from ..utils.logger import get_logger
from ..utils.errors import (
    BlowupDetected,
    NonFiniteLogit,
    StepSizeTooLarge,
    ValidationError,
)
from .mdp_model import FeatureMap, FiniteMdp, Policy, policy_from_logits
from .exact_dp import OptimalSolution, evaluate_policy, solve_optimal, value_at
from .occupancy import sa_occupancy
from .critic import (
    best_parameters,
    critic_linear_system,
    gram_data,
    msbe,
    q_of_theta,
    semi_gradient,
)
from .actor import approx_advantage, fisher_rao_rhs, mirror_descent_step

SCHEDULE_KINDS = ('constant', 'exponential', 'polynomial')
METHODS = ('rk4', 'exponential-euler')
CRITIC_MODES = ('semi-gradient', 'exact')
CSV_COLUMNS = ('t', 'theta_norm', 'K_t', 'V_rho', 'gap', 'theta_err', 'msbe', 'drift_lhs', 'drift_rhs')

StepSequence = Union[float, Sequence[float], Callable[[int], float]]


@dataclass(frozen=True)
class TimescaleSchedule:
    """Non-decreasing timescale separation eta_t >= 1.

    constant: eta0; exponential: eta0 exp(k1 t); polynomial: t^p + eta0.
    """

    kind: str = 'constant'
    eta0: float = 1.0
    k1: float = 0.0
    p: float = 0.5

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValidationError(f"Unknown schedule kind '{self.kind}'", 'schedule.kind')
        if not self.eta0 >= 1.0:
            raise ValidationError(f"eta0={self.eta0} must be >= 1", 'schedule.eta0')
        if not self.k1 >= 0.0:
            raise ValidationError(f"k1={self.k1} must be >= 0", 'schedule.k1')
        if not 0.0 < self.p <= 1.0:
            raise ValidationError(f"p={self.p} must lie in (0, 1]", 'schedule.p')

    def eta(self, t: float) -> float:
        if self.kind == 'exponential':
            return self.eta0 * math.exp(self.k1 * t)
        if self.kind == 'polynomial':
            return max(t, 0.0) ** self.p + self.eta0
        return self.eta0

    def derivative(self, t: float) -> float:
        if self.kind == 'exponential':
            return self.k1 * self.eta(t)
        if self.kind == 'polynomial':
            return self.p * t ** (self.p - 1.0) if t > 0 else math.inf
        return 0.0

    def integral(self, t0: float, t1: float) -> float:
        """int_{t0}^{t1} eta(r) dr in closed form."""
        if self.kind == 'exponential' and self.k1 > 0:
            return self.eta0 * (math.exp(self.k1 * t1) - math.exp(self.k1 * t0)) / self.k1
        if self.kind == 'polynomial':
            q = self.p + 1.0
            return (t1 ** q - t0 ** q) / q + self.eta0 * (t1 - t0)
        return self.eta0 * (t1 - t0)

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'eta0': self.eta0, 'k1': self.k1, 'p': self.p}

    @classmethod
    def from_dict(cls, spec: Dict[str, Any]) -> 'TimescaleSchedule':
        return cls(kind=spec.get('kind', 'constant'), eta0=float(spec.get('eta0', 1.0)),
                   k1=float(spec.get('k1', 0.0)), p=float(spec.get('p', 0.5)))


@dataclass(frozen=True)
class FlowState:
    t: float
    theta: np.ndarray
    policy: Policy


@dataclass(frozen=True)
class Snapshot:
    """Raw state and diagnostics at one output time."""

    t: float
    theta: np.ndarray
    log_density: np.ndarray
    eta: float
    theta_norm: float
    K_t: float
    V_rho: float
    gap: float
    theta_err: float
    msbe: float
    drift_lhs: float
    drift_rhs: float
    realisability: float
    normalisation: float

    def row(self) -> List[float]:
        return [getattr(self, name) for name in CSV_COLUMNS]


@dataclass
class Trajectory:
    """Ordered snapshots of a flow or scheme run."""

    snapshots: List[Snapshot] = field(default_factory=list)
    method: str = ''
    dt: float = math.nan
    critic_mode: str = 'semi-gradient'
    blowup: Optional[Dict[str, Any]] = None

    def append(self, snapshot: Snapshot) -> None:
        if self.snapshots and not snapshot.t > self.snapshots[-1].t:
            raise ValidationError(f"Snapshot time {snapshot.t} does not increase", 'times-increasing')
        self.snapshots.append(snapshot)

    def __len__(self) -> int:
        return len(self.snapshots)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.snapshots], dtype=float)

    @property
    def thetas(self) -> np.ndarray:
        return np.array([s.theta for s in self.snapshots])

    @property
    def log_densities(self) -> np.ndarray:
        return np.array([s.log_density for s in self.snapshots])

    def policy_at(self, index: int, mu: np.ndarray) -> Policy:
        return Policy(log_density=self.snapshots[index].log_density, mu=mu)

    def to_rows(self) -> List[List[float]]:
        return [s.row() for s in self.snapshots]

    def summary(self) -> Dict[str, Any]:
        if not self.snapshots:
            return {'n_snapshots': 0, 'blowup': self.blowup}
        return {
            'n_snapshots': len(self.snapshots),
            't_final': self.snapshots[-1].t,
            'final_gap': self.snapshots[-1].gap,
            'min_gap': float(np.min(self.column('gap'))),
            'K_max': float(np.max(self.column('K_t'))),
            'theta_norm_max': float(np.max(self.column('theta_norm'))),
            'max_normalisation_residual': float(np.max(self.column('normalisation'))),
            'blowup': self.blowup,
        }


def flow_rhs(state: FlowState, mdp: FiniteMdp, features: FeatureMap,
             schedule: TimescaleSchedule) -> Tuple[np.ndarray, np.ndarray]:
    """Right-hand side (dtheta/dt, dl/dt) = (-eta_t g(theta, pi), -A(.; theta))."""
    dtheta = -schedule.eta(state.t) * semi_gradient(state.theta, state.policy, mdp, features)
    return dtheta, fisher_rao_rhs(state.theta, state.policy, mdp, features)


def _as_step_sequence(steps: StepSequence, name: str) -> Callable[[int], float]:
    if callable(steps):
        return steps
    if np.isscalar(steps):
        value = float(steps)
        return lambda n: value
    values = [float(v) for v in steps]

    def lookup(n: int) -> float:
        if n >= len(values):
            raise ValidationError(f"Step sequence {name} has only {len(values)} entries", name)
        return values[n]
    return lookup


class FlowIntegrator:
    """Integrates the coupled flow and runs the discrete two-timescale scheme."""

    def __init__(self, mdp: FiniteMdp, features: FeatureMap, schedule: TimescaleSchedule,
                 method: Optional[str] = None, critic_mode: str = 'semi-gradient',
                 theta_guard: Optional[float] = None, kl_guard: Optional[float] = None,
                 optimal: Optional[OptimalSolution] = None):
        """Initialize the integrator.

        Args:
            mdp: MDP
            features: Critic features
            schedule: Timescale separation
            method: 'rk4' or 'exponential-euler' (defaults to flow.method)
            critic_mode: 'semi-gradient' for the coupled flow, 'exact' for theta = theta_{pi_t}
            theta_guard: Blowup guard on |theta| (defaults to flow.theta_guard)
            kl_guard: Blowup guard on K_t (defaults to flow.kl_guard)
            optimal: Pre-computed optimal solution used for the value gap
        """
        self.config = get_config()
        self.logger = get_logger(__name__)
        self.mdp = mdp
        self.features = features
        self.schedule = schedule
        self.method = method or self.config.get('flow.method', 'exponential-euler')
        if self.method not in METHODS:
            raise ValidationError(f"Unknown integration method '{self.method}'", 'integrator.method')
        if critic_mode not in CRITIC_MODES:
            raise ValidationError(f"Unknown critic mode '{critic_mode}'", 'integrator.critic_mode')
        self.critic_mode = critic_mode
        self.theta_guard = theta_guard if theta_guard is not None else self.config.get_float('flow.theta_guard', 1e6)
        self.kl_guard = kl_guard if kl_guard is not None else self.config.get_float('flow.kl_guard', 1e4)
        self.log_every = int(self.config.get('flow.log_every_steps', 10000))
        self.optimal = optimal or solve_optimal(mdp)
        self.v_star_rho = float(np.dot(mdp.rho, self.optimal.v))
        self.gamma_const = gram_data(mdp, features).gamma_const

    def default_dt(self, t_end: float) -> float:
        """Exponential-Euler is stable for any eta; RK4 must resolve the critic rate eta_t Gamma."""
        base_dt = self.config.get_float('flow.base_dt', 1e-3)
        if self.method == 'rk4':
            return base_dt * min(1.0, 1.0 / self.schedule.eta(t_end))
        return base_dt

    def _policy(self, u: np.ndarray, t: float) -> Policy:
        if not np.all(np.isfinite(u)):
            raise StepSizeTooLarge(f"Non-finite log-density at t={t:.6g}")
        try:
            return policy_from_logits(u, self.mdp.mu)
        except NonFiniteLogit as e:
            raise StepSizeTooLarge(f"Non-finite log-density at t={t:.6g}") from e

    def _guard(self, t: float, theta: np.ndarray, policy: Policy) -> None:
        if not np.all(np.isfinite(theta)):
            raise StepSizeTooLarge(f"Non-finite critic parameters at t={t:.6g}")
        theta_norm = float(np.linalg.norm(theta))
        if theta_norm > self.theta_guard:
            raise BlowupDetected(f"|theta|={theta_norm:.3e} exceeds guard {self.theta_guard:.1e} at t={t:.6g}", t)
        max_kl = policy.max_kl()
        if max_kl > self.kl_guard:
            raise BlowupDetected(f"K_t={max_kl:.3e} exceeds guard {self.kl_guard:.1e} at t={t:.6g}", t)

    def _actor_q(self, theta: np.ndarray, policy: Policy) -> np.ndarray:
        if self.critic_mode == 'exact':
            return evaluate_policy(policy, self.mdp).q
        return q_of_theta(theta, self.features)

    def _derivatives(self, t: float, theta: np.ndarray, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        policy = self._policy(u, t)
        if self.critic_mode == 'exact':
            dtheta = np.zeros_like(theta)
        else:
            dtheta = -self.schedule.eta(t) * semi_gradient(theta, policy, self.mdp, self.features)
        du = -(self._actor_q(theta, policy) + self.mdp.tau * u)
        return dtheta, du

    def _rk4_step(self, t: float, theta: np.ndarray, u: np.ndarray, h: float) -> Tuple[np.ndarray, np.ndarray]:
        k1 = self._derivatives(t, theta, u)
        k2 = self._derivatives(t + h / 2, theta + h / 2 * k1[0], u + h / 2 * k1[1])
        k3 = self._derivatives(t + h / 2, theta + h / 2 * k2[0], u + h / 2 * k2[1])
        k4 = self._derivatives(t + h, theta + h * k3[0], u + h * k3[1])
        theta_next = theta + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        u_next = u + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        return theta_next, u_next

    def _exponential_euler_step(self, t: float, theta: np.ndarray, u: np.ndarray,
                                h: float) -> Tuple[np.ndarray, np.ndarray]:
        policy = self._policy(u, t)
        q = self._actor_q(theta, policy)
        if self.critic_mode == 'exact':
            theta_next = theta
        else:
            # Frozen-policy critic ODE is linear: theta' = -eta(t) (M theta - b).
            system = critic_linear_system(policy, self.mdp, self.features)
            theta_star = system.fixed_point()
            propagator = scipy.linalg.expm(-self.schedule.integral(t, t + h) * system.matrix)
            theta_next = theta_star + propagator @ (theta - theta_star)
        tau = self.mdp.tau
        u_next = math.exp(-tau * h) * u + (math.expm1(-tau * h) / tau) * q
        return theta_next, u_next

    def _step(self, t: float, theta: np.ndarray, u: np.ndarray, h: float) -> Tuple[np.ndarray, Policy]:
        with np.errstate(over='ignore', invalid='ignore'):
            if self.method == 'rk4':
                theta_next, u_next = self._rk4_step(t, theta, u, h)
            else:
                theta_next, u_next = self._exponential_euler_step(t, theta, u, h)
        policy = self._policy(u_next, t + h)
        self._guard(t + h, theta_next, policy)
        return theta_next, policy

    def diagnose(self, t: float, theta: np.ndarray, policy: Policy) -> Snapshot:
        """Evaluate every per-snapshot diagnostic from the raw state."""
        mdp = self.mdp
        values = evaluate_policy(policy, mdp)
        theta_pi, residual = best_parameters(policy, mdp, self.features, values)
        if self.critic_mode == 'exact':
            theta = theta_pi
        d = sa_occupancy(policy, mdp)
        g = semi_gradient(theta, policy, mdp, self.features, d)
        theta_norm = float(np.linalg.norm(theta))
        k_t = policy.max_kl()
        Gamma = self.gamma_const
        v_rho = value_at(values, mdp.rho)
        return Snapshot(
            t=float(t),
            theta=np.array(theta, dtype=float),
            log_density=np.array(policy.log_density),
            eta=self.schedule.eta(t),
            theta_norm=theta_norm,
            K_t=k_t,
            V_rho=v_rho,
            gap=v_rho - self.v_star_rho,
            theta_err=float(np.linalg.norm(theta - theta_pi)),
            msbe=msbe(theta, policy, mdp, self.features, d),
            drift_lhs=-float(theta @ g),
            drift_rhs=(-0.5 * Gamma * theta_norm ** 2
                       + (mdp.tau * mdp.gamma * k_t) ** 2 / Gamma + mdp.c_inf ** 2 / Gamma),
            realisability=residual,
            normalisation=policy.normalisation_residual(),
        )

    def _output_grid(self, t0: float, t_end: float, output_times: Optional[Sequence[float]]) -> np.ndarray:
        if output_times is None:
            n_outputs = int(self.config.get('flow.default_outputs', 200))
            return np.linspace(t0, t_end, n_outputs + 1)
        grid = np.asarray(output_times, dtype=float)
        if grid.ndim != 1 or grid.size == 0 or np.any(np.diff(grid) <= 0):
            raise ValidationError("Output times must be a strictly increasing sequence", 'output_times')
        if grid[0] < t0 or grid[-1] > t_end + 1e-12:
            raise ValidationError(f"Output times must lie in [{t0}, {t_end}]", 'output_times')
        return grid

    def integrate(self, initial: FlowState, t_end: float, dt: Optional[float] = None,
                  output_times: Optional[Sequence[float]] = None, on_blowup: str = 'raise') -> Trajectory:
        """Integrate the coupled flow from an initial state.

        Args:
            initial: Starting state
            t_end: Final time
            dt: Maximal step (defaults to default_dt); every output interval is split evenly
            output_times: Snapshot times; defaults to an even grid on [t0, t_end]
            on_blowup: 'raise' propagates BlowupDetected, 'truncate' returns the partial trajectory

        Returns:
            Trajectory with one snapshot per output time

        Raises:
            StepSizeTooLarge: If a step produces non-finite values
            BlowupDetected: If a guard trips and on_blowup is 'raise'
        """
        if not t_end > initial.t:
            raise ValidationError(f"t_end={t_end} must exceed the initial time {initial.t}", 'integrator.t_end')
        dt = dt if dt is not None else self.default_dt(t_end)
        if not dt > 0:
            raise ValidationError(f"dt={dt} must be positive", 'integrator.dt')
        grid = self._output_grid(initial.t, t_end, output_times)

        trajectory = Trajectory(method=self.method, dt=dt, critic_mode=self.critic_mode)
        t = float(initial.t)
        theta = np.array(initial.theta, dtype=float)
        policy = initial.policy
        if abs(grid[0] - t) <= 1e-12:
            trajectory.append(self.diagnose(t, theta, policy))
            grid = grid[1:]

        self.logger.info(f"Integrating {self.method} flow to t={t_end} with dt={dt:.3g} "
                         f"({self.critic_mode} critic, {self.schedule.kind} schedule)")
        steps = 0
        try:
            for target in grid:
                n_sub = max(1, int(math.ceil((target - t) / dt - 1e-9)))
                h = (target - t) / n_sub
                start = t
                for i in range(n_sub):
                    theta, policy = self._step(start + i * h, theta, policy.log_density, h)
                    steps += 1
                    if steps % self.log_every == 0:
                        self.logger.debug(f"Step {steps}: t={start + (i + 1) * h:.4f}, "
                                          f"|theta|={np.linalg.norm(theta):.4g}, K={policy.max_kl():.4g}")
                t = float(target)
                trajectory.append(self.diagnose(t, theta, policy))
        except BlowupDetected as e:
            if on_blowup != 'truncate':
                raise
            self.logger.warning(f"Integration stopped: {e}")
            trajectory.blowup = {'t': e.t, 'reason': str(e)}

        self.logger.info(f"Integration finished after {steps} steps, {len(trajectory)} snapshots")
        return trajectory

    def run_two_timescale(self, theta0: np.ndarray, pi0: Policy, critic_steps: StepSequence,
                          actor_steps: StepSequence, n_steps: int, output_every: int = 1,
                          policy_uses_updated_critic: Optional[bool] = None,
                          on_blowup: str = 'raise') -> Trajectory:
        """Run the discrete scheme theta^{n+1} = theta^n - h_n g(theta^n, pi^n) with mirror-descent actor steps.

        Snapshot times follow the actor clock t_n = lambda_0 + ... + lambda_{n-1}.

        Args:
            theta0: Initial critic parameters
            pi0: Initial policy
            critic_steps: h_n as a constant, a sequence or a callable of n
            actor_steps: lambda_n in the same forms
            n_steps: Number of steps
            output_every: Snapshot stride in steps (the final step is always recorded)
            policy_uses_updated_critic: Use A(.; theta^{n+1}) in the actor step (defaults to
                flow.policy_uses_updated_critic)
            on_blowup: 'raise' or 'truncate'

        Returns:
            Trajectory on the actor clock
        """
        if n_steps < 1 or output_every < 1:
            raise ValidationError("n_steps and output_every must be positive", 'scheme.n_steps')
        if policy_uses_updated_critic is None:
            policy_uses_updated_critic = bool(self.config.get('flow.policy_uses_updated_critic', True))
        h_of = _as_step_sequence(critic_steps, 'scheme.h')
        lam_of = _as_step_sequence(actor_steps, 'scheme.lambda')

        trajectory = Trajectory(method='two-timescale', dt=lam_of(0), critic_mode='semi-gradient')
        theta = np.array(theta0, dtype=float)
        policy = pi0
        t = 0.0
        trajectory.append(self.diagnose(t, theta, policy))
        try:
            for n in range(n_steps):
                h, lam = h_of(n), lam_of(n)
                if not (h > 0 and lam > 0):
                    raise ValidationError(f"Steps must be positive at n={n}: h={h}, lambda={lam}", 'scheme.steps')
                if not h / lam > 1.0:
                    raise ValidationError(f"Timescale separation h/lambda={h / lam:.3g} must exceed 1 at n={n}",
                                          'scheme.eta')
                theta_next = theta - h * semi_gradient(theta, policy, self.mdp, self.features)
                critic_for_actor = theta_next if policy_uses_updated_critic else theta
                advantage = approx_advantage(critic_for_actor, policy, self.mdp, self.features)
                policy = mirror_descent_step(policy, advantage, lam)
                theta = theta_next
                t += lam
                self._guard(t, theta, policy)
                if (n + 1) % output_every == 0 or n + 1 == n_steps:
                    trajectory.append(self.diagnose(t, theta, policy))
        except BlowupDetected as e:
            if on_blowup != 'truncate':
                raise
            self.logger.warning(f"Two-timescale scheme stopped: {e}")
            trajectory.blowup = {'t': e.t, 'reason': str(e)}
        return trajectory


def integrate(initial: FlowState, mdp: FiniteMdp, features: FeatureMap, schedule: TimescaleSchedule,
              t_end: float, method: Optional[str] = None, dt: Optional[float] = None,
              output_times: Optional[Sequence[float]] = None, critic_mode: str = 'semi-gradient',
              on_blowup: str = 'raise') -> Trajectory:
    """Functional entry point for FlowIntegrator.integrate."""
    integrator = FlowIntegrator(mdp, features, schedule, method=method, critic_mode=critic_mode)
    return integrator.integrate(initial, t_end, dt=dt, output_times=output_times, on_blowup=on_blowup)


def run_two_timescale(theta0: np.ndarray, pi0: Policy, mdp: FiniteMdp, features: FeatureMap,
                      critic_steps: StepSequence, actor_steps: StepSequence, n_steps: int,
                      output_every: int = 1, policy_uses_updated_critic: Optional[bool] = None) -> Trajectory:
    """Functional entry point for FlowIntegrator.run_two_timescale (eta_n = h_n/lambda_n)."""
    integrator = FlowIntegrator(mdp, features, TimescaleSchedule())
    return integrator.run_two_timescale(theta0, pi0, critic_steps, actor_steps, n_steps,
                                        output_every=output_every,
                                        policy_uses_updated_critic=policy_uses_updated_critic)
