#!/usr/bin/env python3
"""Experiment orchestrator: runs flows, schemes and certificate suites from JSON configs."""

import sys
import copy
import json
import time
import argparse
import itertools
from pathlib import Path
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.modules.mdp_model import (
    STRUCTURES,
    load_mdp_file,
    policy_from_logits,
    sample_random_mdp,
    save_mdp_file,
    uniform_policy,
)
from src.modules.exact_dp import solve_optimal
from src.modules.critic import best_parameters
from src.modules.flow import CRITIC_MODES, CSV_COLUMNS, METHODS, FlowIntegrator, FlowState, TimescaleSchedule
from src.modules.analysis import CHECK_GROUPS, CertificateSuite, compute_constants
from src.utils.config import get_config
from src.utils.logger import get_logger, log_run_start, log_run_end, log_error
from src.utils.errors import ConfigError, DimensionMismatch, InadmissibleEta, LabError, ValidationError
from src.utils.provenance import generate_content_hash, short_hash, to_jsonable, write_csv, write_json

SCHEMES = ('flow', 'two-timescale')
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CERTIFICATE_FAILURE = 2

SUMMARY_COLUMNS = ('point', 'status', 'exit_code', 'final_gap', 'K_max', 'n_pass', 'n_fail',
                   'n_expected_fail', 'n_not_applicable', 'small_gamma_flag', 'eta0_admissible',
                   'inadmissible_eta', 'error')


def _check_keys(section: Dict[str, Any], allowed: Tuple[str, ...], prefix: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"Unknown field '{prefix}.{unknown[0]}'", f"{prefix}.{unknown[0]}")


def _section(document: Dict[str, Any], key: str, prefix: str = '', required: bool = True) -> Dict[str, Any]:
    name = f"{prefix}.{key}" if prefix else key
    value = document.get(key)
    if value is None:
        if required:
            raise ConfigError(f"Missing section '{name}'", name)
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"Section '{name}' must be an object", name)
    return value


def _number(value: Any, name: str, minimum: Optional[float] = None, strict: bool = True,
            maximum: Optional[float] = None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"Field '{name}' must be a number, got {value!r}", name)
    value = float(value)
    if not np.isfinite(value):
        raise ConfigError(f"Field '{name}' must be finite", name)
    if minimum is not None and (value <= minimum if strict else value < minimum):
        raise ConfigError(f"Field '{name}'={value} must be {'>' if strict else '>='} {minimum}", name)
    if maximum is not None and value >= maximum:
        raise ConfigError(f"Field '{name}'={value} must be < {maximum}", name)
    return value


def _integer(value: Any, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"Field '{name}' must be an integer, got {value!r}", name)
    if value < minimum:
        raise ConfigError(f"Field '{name}'={value} must be >= {minimum}", name)
    return value


def _choice(value: Any, name: str, options: Tuple[str, ...]) -> str:
    if value not in options:
        raise ConfigError(f"Field '{name}' must be one of {', '.join(options)}, got {value!r}", name)
    return value


def _steps(value: Any, name: str) -> Union[float, List[float]]:
    if isinstance(value, list):
        if not value:
            raise ConfigError(f"Field '{name}' must not be empty", name)
        return [_number(v, f"{name}[{i}]", minimum=0.0) for i, v in enumerate(value)]
    return _number(value, name, minimum=0.0)


def parse_generator(section: Dict[str, Any], prefix: str = 'mdp.generator') -> Dict[str, Any]:
    """Validate a random-MDP generator spec.

    Args:
        section: Generator fields (seed, n_states, n_actions, gamma, tau, structure, feature_dim)
        prefix: Dotted prefix used in error messages

    Returns:
        Normalised keyword arguments for sample_random_mdp
    """
    _check_keys(section, ('seed', 'n_states', 'n_actions', 'gamma', 'tau', 'structure', 'feature_dim'), prefix)
    if 'seed' not in section:
        raise ConfigError(f"Generator seed is required at '{prefix}.seed'", f"{prefix}.seed")
    for key in ('n_states', 'n_actions', 'gamma', 'tau'):
        if key not in section:
            raise ConfigError(f"Missing field '{prefix}.{key}'", f"{prefix}.{key}")
    generator = {
        'seed': _integer(section['seed'], f"{prefix}.seed", minimum=0),
        'n_states': _integer(section['n_states'], f"{prefix}.n_states"),
        'n_actions': _integer(section['n_actions'], f"{prefix}.n_actions"),
        'gamma': _number(section['gamma'], f"{prefix}.gamma", minimum=0.0, strict=False, maximum=1.0),
        'tau': _number(section['tau'], f"{prefix}.tau", minimum=0.0),
        'structure': _choice(section.get('structure', 'tabular-onehot'), f"{prefix}.structure", STRUCTURES),
        'feature_dim': None,
    }
    if section.get('feature_dim') is not None:
        generator['feature_dim'] = _integer(section['feature_dim'], f"{prefix}.feature_dim")
    return generator


@dataclass
class ExperimentConfig:
    """A validated experiment document.

    The normalised form returned by `to_dict` (output directory excluded) is what
    the config hash is computed from, so equivalent documents share a hash.
    """

    name: str
    schedule: TimescaleSchedule
    mdp_file: Optional[str] = None
    generator: Optional[Dict[str, Any]] = None
    theta0: Union[str, List[float]] = 'zero'
    policy0: Union[str, List[List[float]]] = 'uniform'
    scheme: str = 'flow'
    method: Optional[str] = None
    dt: Optional[float] = None
    t_end: Optional[float] = None
    n_outputs: Optional[int] = None
    output_times: Optional[List[float]] = None
    critic_mode: str = 'semi-gradient'
    critic_step: Optional[Union[float, List[float]]] = None
    actor_step: Optional[Union[float, List[float]]] = None
    n_steps: Optional[int] = None
    output_every: int = 1
    policy_uses_updated_critic: Optional[bool] = None
    certificates: List[str] = field(default_factory=lambda: list(CHECK_GROUPS))
    rate_window: Optional[Tuple[float, float]] = None
    output_dir: Optional[str] = None
    base_dir: Path = field(default_factory=Path.cwd)
    mdp_content_hash: Optional[str] = None

    @property
    def mdp_path(self) -> Optional[Path]:
        if self.mdp_file is None:
            return None
        path = Path(self.mdp_file)
        return path if path.is_absolute() else self.base_dir / path

    @classmethod
    def from_file(cls, path: Union[str, Path], seed_override: Optional[int] = None) -> 'ExperimentConfig':
        """Load and validate an experiment config file.

        Raises:
            ConfigError: If the file is missing, is not JSON or fails validation
        """
        return cls.from_dict(_read_document(path), Path(path).resolve().parent, seed_override)

    @classmethod
    def from_dict(cls, document: Dict[str, Any], base_dir: Optional[Path] = None,
                  seed_override: Optional[int] = None) -> 'ExperimentConfig':
        """Validate an experiment document field by field.

        Args:
            document: Parsed JSON document
            base_dir: Directory that relative MDP file paths are resolved against
            seed_override: Replaces mdp.generator.seed when given

        Returns:
            ExperimentConfig

        Raises:
            ConfigError: Naming the first offending dotted field
        """
        if not isinstance(document, dict):
            raise ConfigError("Experiment config must be a JSON object", '<root>')
        _check_keys(document, ('name', 'mdp', 'schedule', 'initial', 'integrator', 'certificates',
                               'output_dir'), '<root>')
        base_dir = base_dir or Path.cwd()

        name = document.get('name', 'experiment')
        if not isinstance(name, str) or not name:
            raise ConfigError("Field 'name' must be a non-empty string", 'name')

        mdp_section = _section(document, 'mdp')
        _check_keys(mdp_section, ('file', 'generator'), 'mdp')
        if ('file' in mdp_section) == ('generator' in mdp_section):
            raise ConfigError("Exactly one of 'mdp.file' and 'mdp.generator' must be given", 'mdp')
        mdp_file = generator = content_hash = None
        if 'file' in mdp_section:
            mdp_file = mdp_section['file']
            if not isinstance(mdp_file, str):
                raise ConfigError("Field 'mdp.file' must be a path string", 'mdp.file')
            resolved = Path(mdp_file) if Path(mdp_file).is_absolute() else base_dir / mdp_file
            if not resolved.is_file():
                raise ConfigError(f"MDP file not found: {resolved}", 'mdp.file')
            content_hash = generate_content_hash(_read_document(resolved, 'mdp.file'))
        else:
            generator = dict(_section(mdp_section, 'generator', 'mdp'))
            if seed_override is not None:
                generator['seed'] = seed_override
            generator = parse_generator(generator)

        schedule_section = _section(document, 'schedule')
        _check_keys(schedule_section, ('kind', 'eta0', 'k1', 'p'), 'schedule')
        for key in ('eta0', 'k1', 'p'):
            if key in schedule_section:
                _number(schedule_section[key], f"schedule.{key}")
        try:
            schedule = TimescaleSchedule.from_dict(schedule_section)
        except ValidationError as e:
            raise ConfigError(str(e), e.invariant or 'schedule') from e

        initial = _section(document, 'initial', required=False)
        _check_keys(initial, ('theta', 'policy'), 'initial')
        theta0 = initial.get('theta', 'zero')
        if isinstance(theta0, list):
            theta0 = [_number(v, f"initial.theta[{i}]", minimum=None) for i, v in enumerate(theta0)]
        else:
            theta0 = _choice(theta0, 'initial.theta', ('zero', 'best'))
        policy0 = initial.get('policy', 'uniform')
        if isinstance(policy0, list):
            if not all(isinstance(row, list) for row in policy0):
                raise ConfigError("Field 'initial.policy' logits must be a list of rows", 'initial.policy')
            policy0 = [[_number(v, f"initial.policy[{s}][{a}]") for a, v in enumerate(row)]
                       for s, row in enumerate(policy0)]
        else:
            policy0 = _choice(policy0, 'initial.policy', ('uniform', 'optimal'))

        integrator = _section(document, 'integrator')
        _check_keys(integrator, ('scheme', 'method', 'dt', 't_end', 'n_outputs', 'output_times', 'critic_mode',
                                 'critic_step', 'actor_step', 'n_steps', 'output_every',
                                 'policy_uses_updated_critic'), 'integrator')
        scheme = _choice(integrator.get('scheme', 'flow'), 'integrator.scheme', SCHEMES)
        values: Dict[str, Any] = {}
        if scheme == 'flow':
            if 't_end' not in integrator:
                raise ConfigError("Missing field 'integrator.t_end'", 'integrator.t_end')
            values['t_end'] = _number(integrator['t_end'], 'integrator.t_end', minimum=0.0)
            if integrator.get('method') is not None:
                values['method'] = _choice(integrator['method'], 'integrator.method', METHODS)
            if integrator.get('dt') is not None:
                values['dt'] = _number(integrator['dt'], 'integrator.dt', minimum=0.0)
            values['critic_mode'] = _choice(integrator.get('critic_mode', 'semi-gradient'),
                                            'integrator.critic_mode', CRITIC_MODES)
            if integrator.get('n_outputs') is not None and integrator.get('output_times') is not None:
                raise ConfigError("Give at most one of 'integrator.n_outputs' and 'integrator.output_times'",
                                  'integrator.output_times')
            if integrator.get('n_outputs') is not None:
                values['n_outputs'] = _integer(integrator['n_outputs'], 'integrator.n_outputs')
            if integrator.get('output_times') is not None:
                times = integrator['output_times']
                if not isinstance(times, list) or not times:
                    raise ConfigError("Field 'integrator.output_times' must be a non-empty list",
                                      'integrator.output_times')
                values['output_times'] = [_number(v, f"integrator.output_times[{i}]", minimum=0.0, strict=False)
                                          for i, v in enumerate(times)]
                if any(b <= a for a, b in zip(values['output_times'], values['output_times'][1:])):
                    raise ConfigError("Field 'integrator.output_times' must increase strictly",
                                      'integrator.output_times')
                if values['output_times'][-1] > values['t_end']:
                    raise ConfigError("Output times must not exceed t_end", 'integrator.output_times')
        else:
            for key in ('critic_step', 'actor_step', 'n_steps'):
                if key not in integrator:
                    raise ConfigError(f"Missing field 'integrator.{key}'", f"integrator.{key}")
            values['critic_step'] = _steps(integrator['critic_step'], 'integrator.critic_step')
            values['actor_step'] = _steps(integrator['actor_step'], 'integrator.actor_step')
            values['n_steps'] = _integer(integrator['n_steps'], 'integrator.n_steps')
            values['output_every'] = _integer(integrator.get('output_every', 1), 'integrator.output_every')
            flag = integrator.get('policy_uses_updated_critic')
            if flag is not None and not isinstance(flag, bool):
                raise ConfigError("Field 'integrator.policy_uses_updated_critic' must be a boolean",
                                  'integrator.policy_uses_updated_critic')
            values['policy_uses_updated_critic'] = flag

        certificates = _section(document, 'certificates', required=False)
        _check_keys(certificates, ('enabled', 'rate_window'), 'certificates')
        enabled = certificates.get('enabled', list(CHECK_GROUPS))
        if not isinstance(enabled, list):
            raise ConfigError("Field 'certificates.enabled' must be a list", 'certificates.enabled')
        enabled = [_choice(group, f"certificates.enabled[{i}]", CHECK_GROUPS) for i, group in enumerate(enabled)]
        rate_window = certificates.get('rate_window')
        if rate_window is not None:
            if not isinstance(rate_window, list) or len(rate_window) != 2:
                raise ConfigError("Field 'certificates.rate_window' must be [t_start, t_stop]",
                                  'certificates.rate_window')
            start = _number(rate_window[0], 'certificates.rate_window[0]', minimum=0.0, strict=False)
            stop = _number(rate_window[1], 'certificates.rate_window[1]', minimum=start)
            rate_window = (start, stop)

        output_dir = document.get('output_dir')
        if output_dir is not None and not isinstance(output_dir, str):
            raise ConfigError("Field 'output_dir' must be a path string", 'output_dir')

        return cls(name=name, schedule=schedule, mdp_file=mdp_file, generator=generator, theta0=theta0,
                   policy0=policy0, scheme=scheme, certificates=enabled, rate_window=rate_window,
                   output_dir=output_dir, base_dir=base_dir, mdp_content_hash=content_hash, **values)

    def to_dict(self) -> Dict[str, Any]:
        if self.scheme == 'flow':
            integrator = {'scheme': 'flow', 'method': self.method, 'dt': self.dt, 't_end': self.t_end,
                          'n_outputs': self.n_outputs, 'output_times': self.output_times,
                          'critic_mode': self.critic_mode}
        else:
            integrator = {'scheme': 'two-timescale', 'critic_step': self.critic_step,
                          'actor_step': self.actor_step, 'n_steps': self.n_steps,
                          'output_every': self.output_every,
                          'policy_uses_updated_critic': self.policy_uses_updated_critic}
        mdp = {'file': self.mdp_file} if self.mdp_file is not None else {'generator': dict(self.generator)}
        return {
            'name': self.name,
            'mdp': mdp,
            'schedule': self.schedule.to_dict(),
            'initial': {'theta': self.theta0, 'policy': self.policy0},
            'integrator': integrator,
            'certificates': {'enabled': list(self.certificates),
                             'rate_window': list(self.rate_window) if self.rate_window else None},
        }

    @property
    def config_hash(self) -> str:
        return generate_content_hash({'experiment': self.to_dict(), 'mdp_content': self.mdp_content_hash})


def _read_document(path: Union[str, Path], name: str = 'config') -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"File not found: {path}", name)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}", name) from e


class ExperimentPipeline:
    """Runs one experiment: MDP, optimum, initial condition, constants, trajectory, certificates."""

    def __init__(self, experiment: ExperimentConfig, output_dir: Optional[Union[str, Path]] = None,
                 run_id: Optional[str] = None):
        """Initialize pipeline.

        Args:
            experiment: Validated experiment config
            output_dir: Artifact directory (defaults to the config's output_dir, then
                paths.output_dir/<name>)
            run_id: Run identifier for logs
        """
        self.config = get_config()
        self.logger = get_logger(__name__)
        self.experiment = experiment
        self.config_hash = experiment.config_hash
        self.run_id = run_id or f"{experiment.name}-{self.config_hash[:8]}"

        if output_dir is not None:
            self.output_dir = Path(output_dir)
        elif experiment.output_dir is not None:
            self.output_dir = Path(experiment.output_dir)
        else:
            self.output_dir = self.config.get_paths()['output_dir'] / experiment.name

        self.mdp = None
        self.features = None
        self.linear_spec = None
        self.optimal = None
        self.theta0 = None
        self.pi0 = None
        self.constants = None
        self.trajectory = None
        self.report = None

        # Pipeline state; written to run_state.json, so it holds no timestamps
        self.state = {
            'run_id': self.run_id,
            'config_hash': self.config_hash,
            'status': 'pending',
            'exit_code': None,
            'current_step': None,
            'artifacts': {},
            'warnings': [],
            'errors': []
        }

    def prepare(self) -> Dict[str, Any]:
        """Build every input of the run without integrating; used by `validate`."""
        self._run_step('mdp', self._step_load_mdp)
        self._run_step('optimal', self._step_solve_optimal)
        self._run_step('initial_condition', self._step_initial_condition)
        self._run_step('constants', self._step_constants)
        return self.state

    def run(self, write_artifacts: bool = True) -> Dict[str, Any]:
        """Run the complete experiment.

        Returns:
            Pipeline state with status and exit_code
        """
        start_time = time.time()
        log_run_start(self.run_id, {'config_hash': self.config_hash})
        self.logger.info(f"Starting experiment {self.run_id} -> {self.output_dir}")

        try:
            self.prepare()
            self._run_step('integration', self._step_integrate)
            self._run_step('certificates', self._step_certificates)
            if write_artifacts:
                self._run_step('artifacts', self._step_write_artifacts)

            if self.report.has_failures:
                self.state['status'] = 'certificate-failure'
                self.state['exit_code'] = EXIT_CERTIFICATE_FAILURE
            else:
                self.state['status'] = 'passed'
                self.state['exit_code'] = EXIT_OK

        except Exception as e:
            self.state['status'] = 'error'
            self.state['exit_code'] = EXIT_ERROR
            self.state['errors'].append(f"{type(e).__name__}: {e}")
            log_error(f"Experiment failed: {self.run_id}", e, {'run_id': self.run_id})

        finally:
            duration = time.time() - start_time
            if write_artifacts:
                self._save_state()
            log_run_end(self.run_id, self.state['status'], duration, {'config_hash': self.config_hash})

        return self.state

    def _run_step(self, step_name: str, step_function):
        """Run a pipeline step with error handling.

        Args:
            step_name: Name of the step
            step_function: Function to execute
        """
        self.state['current_step'] = step_name
        self.logger.info(f"Running step: {step_name}")

        try:
            result = step_function()
            self.state['artifacts'][step_name] = result
            self.logger.info(f"Step completed: {step_name}")
        except Exception as e:
            self.logger.error(f"Step failed: {step_name} - {e}")
            raise

    def _step_load_mdp(self) -> Dict[str, Any]:
        experiment = self.experiment
        if experiment.mdp_path is not None:
            self.mdp, self.features, self.linear_spec = load_mdp_file(experiment.mdp_path)
            source = experiment.mdp_file
        else:
            self.mdp, self.features, self.linear_spec = sample_random_mdp(**experiment.generator)
            source = f"generator:{experiment.generator['structure']}:seed={experiment.generator['seed']}"
        return {
            'source': source,
            'n_states': self.mdp.n_states,
            'n_actions': self.mdp.n_actions,
            'feature_dim': self.features.dim,
            'gamma': self.mdp.gamma,
            'tau': self.mdp.tau,
        }

    def _step_solve_optimal(self) -> Dict[str, Any]:
        self.optimal = solve_optimal(self.mdp)
        return {
            'iterations': self.optimal.iterations,
            'residual': self.optimal.residual,
            'v_star_rho': float(np.dot(self.mdp.rho, self.optimal.v)),
        }

    def _step_initial_condition(self) -> Dict[str, Any]:
        experiment, mdp = self.experiment, self.mdp
        if experiment.policy0 == 'uniform':
            self.pi0 = uniform_policy(mdp)
        elif experiment.policy0 == 'optimal':
            self.pi0 = self.optimal.policy
        else:
            logits = np.asarray(experiment.policy0, dtype=float)
            if logits.shape != (mdp.n_states, mdp.n_actions):
                raise DimensionMismatch(f"initial.policy has shape {logits.shape}, expected "
                                        f"{(mdp.n_states, mdp.n_actions)}", 'initial.policy')
            self.pi0 = policy_from_logits(logits, mdp.mu)

        if experiment.theta0 == 'zero':
            self.theta0 = np.zeros(self.features.dim)
        elif experiment.theta0 == 'best':
            self.theta0 = best_parameters(self.pi0, mdp, self.features)[0]
        else:
            self.theta0 = np.asarray(experiment.theta0, dtype=float)
            if self.theta0.shape != (self.features.dim,):
                raise DimensionMismatch(f"initial.theta has length {self.theta0.size}, expected "
                                        f"{self.features.dim}", 'initial.theta')
        return {'theta0_norm': float(np.linalg.norm(self.theta0)), 'K_0': self.pi0.max_kl()}

    def _step_constants(self) -> Dict[str, Any]:
        self.constants = compute_constants(self.mdp, self.features, self.theta0, self.pi0,
                                           self.experiment.schedule, strict=False, optimal=self.optimal)
        if not self.constants.eta0_stable:
            warning = str(InadmissibleEta(self.constants.eta0, self.mdp.tau / self.constants.gamma_const))
            self.state['warnings'].append(f"InadmissibleEta: {warning}")
            self.logger.warning(f"Stability hypothesis violated: {warning}")
        return {
            'gamma_const': self.constants.gamma_const,
            'eta0_admissible': self.constants.eta0_admissible,
            'small_gamma_flag': self.constants.small_gamma_flag,
        }

    def _output_times(self) -> Optional[List[float]]:
        experiment = self.experiment
        if experiment.output_times is not None:
            return [0.0] + [t for t in experiment.output_times if t > 0.0]
        if experiment.n_outputs is not None:
            return list(np.linspace(0.0, experiment.t_end, experiment.n_outputs + 1))
        return None

    def _step_integrate(self) -> Dict[str, Any]:
        experiment = self.experiment
        integrator = FlowIntegrator(self.mdp, self.features, experiment.schedule, method=experiment.method,
                                    critic_mode=experiment.critic_mode, optimal=self.optimal)
        if experiment.scheme == 'flow':
            self.trajectory = integrator.integrate(FlowState(t=0.0, theta=self.theta0, policy=self.pi0),
                                                   experiment.t_end, dt=experiment.dt,
                                                   output_times=self._output_times(), on_blowup='truncate')
        else:
            self.trajectory = integrator.run_two_timescale(
                self.theta0, self.pi0, experiment.critic_step, experiment.actor_step, experiment.n_steps,
                output_every=experiment.output_every,
                policy_uses_updated_critic=experiment.policy_uses_updated_critic,
                on_blowup='truncate')
        if self.trajectory.blowup is not None:
            self.state['warnings'].append(f"BlowupDetected: {self.trajectory.blowup['reason']}")
        return self.trajectory.summary()

    def _step_certificates(self) -> Dict[str, Any]:
        suite = CertificateSuite(self.mdp, self.features, self.experiment.schedule, self.constants, self.optimal)
        self.report = suite.run(self.trajectory, enabled=self.experiment.certificates,
                                rate_window=self.experiment.rate_window)
        return self.report.counts()

    def _step_write_artifacts(self) -> Dict[str, Any]:
        out = self.output_dir
        trajectory = self.trajectory
        files = [
            write_csv(out / 'trajectory.csv', CSV_COLUMNS, trajectory.to_rows(), self.config_hash),
            write_json(out / 'trajectory.json', {
                'config': self.experiment.to_dict(),
                'method': trajectory.method,
                'dt': trajectory.dt,
                'critic_mode': trajectory.critic_mode,
                'summary': trajectory.summary(),
                'constants': self.constants.to_dict(),
                'snapshots': [{'t': s.t, 'eta': s.eta, 'theta': s.theta, 'log_density': s.log_density}
                              for s in trajectory.snapshots],
            }, self.config_hash),
            write_json(out / 'constants.json', self.constants.to_dict(), self.config_hash),
            write_json(out / 'certificates.json', dict(self.report.to_dict(), warnings=self.state['warnings']),
                       self.config_hash),
        ]
        return {'files': sorted(path.name for path in files)}

    def _save_state(self):
        """Save pipeline state to file."""
        state_file = write_json(self.output_dir / 'run_state.json', self.state, self.config_hash)
        self.logger.info(f"Pipeline state saved to {state_file}")


def run_experiment(config_path: Union[str, Path], output_dir: Optional[Union[str, Path]] = None,
                   seed_override: Optional[int] = None) -> Tuple[int, Dict[str, Any]]:
    """Run one experiment config end to end.

    Returns:
        Tuple of (exit code, pipeline state); configuration errors give exit code 1
    """
    logger = get_logger(__name__)
    try:
        experiment = ExperimentConfig.from_file(config_path, seed_override)
    except ConfigError as e:
        logger.error(f"Invalid experiment config {config_path}: {e}")
        return EXIT_ERROR, {'status': 'error', 'exit_code': EXIT_ERROR, 'errors': [f"ConfigError: {e}"]}
    state = ExperimentPipeline(experiment, output_dir).run()
    return state['exit_code'], state


def _set_dotted(document: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split('.')
    node = document
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"Grid key '{key}' does not address a config field", f"grid.{key}")
        node = node[part]
    node[parts[-1]] = value


@dataclass
class SweepConfig:
    """Base experiment document plus a grid {dotted key: values}; points are the Cartesian product."""

    base: Dict[str, Any]
    grid: Dict[str, List[Any]]
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> 'SweepConfig':
        document = _read_document(path)
        if not isinstance(document, dict):
            raise ConfigError("Sweep config must be a JSON object", '<root>')
        grid = _section(document, 'grid')
        if not grid:
            raise ConfigError("Sweep grid must not be empty", 'grid')
        for key, values in grid.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"Grid values for '{key}' must be a non-empty list", f"grid.{key}")
        base = {k: v for k, v in document.items() if k != 'grid'}
        return cls(base=base, grid=dict(grid), base_dir=Path(path).resolve().parent)

    @property
    def name(self) -> str:
        return str(self.base.get('name', 'sweep'))

    def points(self) -> List[Dict[str, Any]]:
        keys = list(self.grid)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.grid[k] for k in keys))]

    def point_document(self, overrides: Dict[str, Any]) -> Dict[str, Any]:
        document = copy.deepcopy(self.base)
        for key, value in overrides.items():
            _set_dotted(document, key, value)
        return document

    @property
    def config_hash(self) -> str:
        return generate_content_hash({'base': self.base, 'grid': self.grid})


def _summary_row(index: int, overrides: Dict[str, Any], pipeline: Optional[ExperimentPipeline],
                 error: str = '') -> List[Any]:
    params = [overrides[k] for k in overrides]
    if pipeline is None:
        return [index] + params + ['error', EXIT_ERROR, '', '', '', '', '', '', '', '', '', error]
    state = pipeline.state
    trajectory, report, constants = pipeline.trajectory, pipeline.report, pipeline.constants
    final_gap = float(trajectory.snapshots[-1].gap) if trajectory is not None and len(trajectory) else ''
    k_max = float(np.max(trajectory.column('K_t'))) if trajectory is not None and len(trajectory) else ''
    counts = report.counts() if report is not None else {}
    inadmissible = next((w for w in state['warnings'] if w.startswith('InadmissibleEta')), '')
    return [index] + params + [
        state['status'], state['exit_code'], final_gap, k_max,
        counts.get('pass', ''), counts.get('fail', ''), counts.get('expected-fail', ''),
        counts.get('not-applicable', ''),
        constants.small_gamma_flag if constants is not None else '',
        constants.eta0_admissible if constants is not None else '',
        inadmissible, '; '.join(state['errors']) or error,
    ]


def run_sweep(sweep: SweepConfig, output_dir: Optional[Union[str, Path]] = None, threads: Optional[int] = None,
              seed_override: Optional[int] = None) -> Tuple[int, List[List[Any]]]:
    """Run every grid point in parallel and write summary.csv.

    Each point is independent; a failing point is reported in the summary and
    does not stop the others.

    Returns:
        Tuple of (exit code, summary rows); the exit code is the worst over points
    """
    config = get_config()
    logger = get_logger(__name__)
    threads = threads or int(config.get('sweep.threads', 4))
    if output_dir is not None:
        root = Path(output_dir)
    elif sweep.base.get('output_dir'):
        root = Path(sweep.base['output_dir'])
    else:
        root = config.get_paths()['output_dir'] / sweep.name
    points = sweep.points()
    logger.info(f"Sweep {sweep.name}: {len(points)} points on {threads} threads -> {root}")

    def run_point(index: int, overrides: Dict[str, Any]) -> List[Any]:
        try:
            experiment = ExperimentConfig.from_dict(sweep.point_document(overrides), sweep.base_dir,
                                                    seed_override)
        except ConfigError as e:
            logger.error(f"Sweep point {index} has an invalid config: {e}")
            return _summary_row(index, overrides, None, f"ConfigError: {e}")
        pipeline = ExperimentPipeline(experiment, root / f"point_{index:03d}",
                                      run_id=f"{sweep.name}-{index:03d}-{short_hash(experiment.to_dict(), 8)}")
        pipeline.run()
        return _summary_row(index, overrides, pipeline)

    with ThreadPoolExecutor(max_workers=threads) as executor:
        futures = [executor.submit(run_point, index, overrides) for index, overrides in enumerate(points)]
        rows = [future.result() for future in futures]

    columns = [SUMMARY_COLUMNS[0]] + list(sweep.grid) + list(SUMMARY_COLUMNS[1:])
    write_csv(root / 'summary.csv', columns, rows, sweep.config_hash)
    exit_code = max(row[len(sweep.grid) + 2] for row in rows)
    return exit_code, rows


def generate_mdp_file(spec_path: Union[str, Path], output_path: Union[str, Path],
                      seed_override: Optional[int] = None) -> Path:
    """Sample an MDP from a generator spec file and write its description file."""
    document = _read_document(spec_path, 'spec')
    if not isinstance(document, dict):
        raise ConfigError("Generator spec must be a JSON object", 'spec')
    section = dict(document.get('generator', document))
    if seed_override is not None:
        section['seed'] = seed_override
    generator = parse_generator(section, prefix='generator')
    mdp, features, spec = sample_random_mdp(**generator)
    return save_mdp_file(output_path, mdp, features, spec)


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the experiment CLI."""
    parser = argparse.ArgumentParser(description='Entropy-regularised actor-critic laboratory')
    subparsers = parser.add_subparsers(dest='command', required=True)

    run_parser = subparsers.add_parser('run', help='Run one experiment config')
    run_parser.add_argument('config', type=str, help='Experiment config (JSON)')
    sweep_parser = subparsers.add_parser('sweep', help='Run a parameter grid')
    sweep_parser.add_argument('config', type=str, help='Sweep config (JSON with a grid section)')
    sweep_parser.add_argument('--threads', type=int, help='Parallel sweep points')
    validate_parser = subparsers.add_parser('validate', help='Validate a config and report its constants')
    validate_parser.add_argument('config', type=str, help='Experiment config (JSON)')
    gen_parser = subparsers.add_parser('gen-mdp', help='Write a random MDP description file')
    gen_parser.add_argument('spec', type=str, help='Generator spec (JSON)')
    gen_parser.add_argument('-o', '--output', type=str, required=True, help='Destination file')

    for sub in (run_parser, sweep_parser):
        sub.add_argument('--out-dir', type=str, help='Artifact directory')
    for sub in (run_parser, sweep_parser, validate_parser, gen_parser):
        sub.add_argument('--seed-override', type=int, help='Replace the generator seed')
    args = parser.parse_args(argv)

    config = get_config()
    try:
        config.validate()
    except ValueError as e:
        print(f"Configuration error: {e}")
        return EXIT_ERROR

    try:
        if args.command == 'run':
            exit_code, state = run_experiment(args.config, args.out_dir, args.seed_override)
            print(f"\n{'='*60}")
            print(f"Experiment Result: {state['status'].upper()} (exit {exit_code})")
            print(f"{'='*60}")
            if 'certificates' in state.get('artifacts', {}):
                for status, count in state['artifacts']['certificates'].items():
                    print(f"  {status}: {count}")
            for warning in state.get('warnings', []):
                print(f"  warning: {warning}")
            for error in state.get('errors', []):
                print(f"  error: {error}")
            return exit_code

        if args.command == 'sweep':
            exit_code, rows = run_sweep(SweepConfig.from_file(args.config), args.out_dir, args.threads,
                                        args.seed_override)
            print(f"Sweep finished: {len(rows)} points, exit {exit_code}")
            return exit_code

        if args.command == 'validate':
            experiment = ExperimentConfig.from_file(args.config, args.seed_override)
            pipeline = ExperimentPipeline(experiment)
            pipeline.prepare()
            print(json.dumps(to_jsonable({
                'config_hash': experiment.config_hash,
                'mdp': pipeline.state['artifacts']['mdp'],
                'constants': pipeline.state['artifacts']['constants'],
                'warnings': pipeline.state['warnings'],
            }), indent=2))
            return EXIT_OK

        path = generate_mdp_file(args.spec, args.output, args.seed_override)
        print(f"MDP written to {path}")
        return EXIT_OK

    except LabError as e:
        print(f"{type(e).__name__}: {e}")
        return EXIT_ERROR
    except KeyboardInterrupt:
        print("\n\nInterrupted by user")
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
