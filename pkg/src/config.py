"""
Configuration management for safe exploration experiments.

Process-level settings come from the environment (and an optional .env
file); experiment settings come from a JSON file.
"""
import json
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from dotenv import load_dotenv

from agent import POLICY_ORDER, AgentConfig, Policy, additive_kernel, space_kernel
from env import EnvGenSpec
from safesets import LipschitzParams
from stgp import InvalidKernelError, KernelSpec, kernel_from_dict, kernel_to_dict

logger = logging.getLogger(__name__)

# Load environment variables
load_dotenv()

ENVIRONMENT_STREAM = 0


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""
    pass


class Config:
    """Process-level settings read from the environment."""

    # Seeding
    SAFE_EXPLORE_SEED = os.getenv('SAFE_EXPLORE_SEED')

    # Logging Configuration
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_FILE = os.getenv('LOG_FILE', 'logs/safe_explore.log')

    # Outputs and parallelism
    OUTPUT_DIR = os.getenv('OUTPUT_DIR', 'output')
    WORKERS = int(os.getenv('WORKERS', '1'))

    @classmethod
    def validate(cls) -> bool:
        """
        Validate configuration.

        Returns:
            True if configuration is valid, False otherwise
        """
        errors = []

        if cls.LOG_LEVEL.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            errors.append(f"LOG_LEVEL not recognized: {cls.LOG_LEVEL}")
        if cls.WORKERS < 1:
            errors.append(f"WORKERS must be at least 1, got {cls.WORKERS}")
        if cls.SAFE_EXPLORE_SEED is not None:
            try:
                if int(cls.SAFE_EXPLORE_SEED) < 0:
                    errors.append("SAFE_EXPLORE_SEED must be non-negative")
            except ValueError:
                errors.append(f"SAFE_EXPLORE_SEED is not an integer: {cls.SAFE_EXPLORE_SEED}")

        if errors:
            print("Configuration errors:")
            for error in errors:
                print(f"  - {error}")
            return False

        return True

    @classmethod
    def print_config(cls):
        """Print current configuration."""
        print("Current Configuration:")
        print(f"  Seed Override: {cls.SAFE_EXPLORE_SEED or 'none'}")
        print(f"  Log Level: {cls.LOG_LEVEL}")
        print(f"  Log File: {cls.LOG_FILE}")
        print(f"  Output Dir: {cls.OUTPUT_DIR}")
        print(f"  Workers: {cls.WORKERS}")


def resolve_seed(config_seed: int, cli_seed: Optional[int] = None) -> int:
    """Base seed: command line first, then SAFE_EXPLORE_SEED, then the config file."""
    if cli_seed is not None:
        seed = cli_seed
    elif os.getenv('SAFE_EXPLORE_SEED'):
        try:
            seed = int(os.getenv('SAFE_EXPLORE_SEED'))
        except ValueError as e:
            raise ConfigError(f"SAFE_EXPLORE_SEED is not an integer: {os.getenv('SAFE_EXPLORE_SEED')}") from e
    else:
        seed = config_seed
    if seed < 0:
        raise ConfigError(f"Seeds must be non-negative, got {seed}")
    return int(seed)


def derive_seed(base_seed: int, run_index: int, stream: int) -> int:
    """
    Seed of one random stream.

    SeedSequence([base_seed, run_index, stream]) with stream 0 for the
    environment and 1 + canonical policy position for each agent.
    """
    if min(base_seed, run_index, stream) < 0:
        raise ConfigError("Seed components must be non-negative")
    return int(np.random.SeedSequence([base_seed, run_index, stream]).generate_state(1)[0])


def policy_stream(policy: Policy) -> int:
    return 1 + POLICY_ORDER.index(policy)


def _strict_fields(cls, data: Dict[str, Any], section: str) -> Dict[str, Any]:
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{section}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown key(s) in '{section}': {sorted(unknown)}")
    return data


ENV_KINDS = ('random', 'terrain', 'file')


@dataclass
class EnvironmentConfig:
    """
    Environment section.

    kind 'random' uses the generator fields, 'terrain' reads `frames`
    (interpolated to `steps` slices, optionally resampled to `grid`) and
    'file' loads an environment CSV written by generate-env or ingest-terrain.
    """
    kind: str = 'random'
    rows: int = 20
    cols: int = 20
    lipschitz_time: float = 0.1
    variance: float = 1.0
    length_scale: float = 2.0
    h: float = 0.0
    safe_margin: float = 0.2
    noise_std: float = 0.001
    max_redraws: int = 100
    frames: List[str] = field(default_factory=list)
    steps: Optional[int] = None
    grid: Optional[List[int]] = None
    path: Optional[str] = None

    def validate(self, base_dir: Optional[Path] = None) -> None:
        if self.kind not in ENV_KINDS:
            raise ConfigError(f"environment.kind must be one of {ENV_KINDS}, got {self.kind!r}")
        if self.noise_std < 0:
            raise ConfigError("environment.noise_std must be non-negative")
        if self.kind == 'random':
            try:
                self.gen_spec(seed=0, horizon=1).validate()
            except ValueError as e:
                raise ConfigError(f"environment: {e}") from e
        elif self.kind == 'terrain':
            if len(self.frames) < 2:
                raise ConfigError("environment.frames needs at least two terrain frames")
            for frame in self.resolved_frames(base_dir):
                if not frame.exists():
                    raise ConfigError(f"Terrain frame not found: {frame}")
            if self.grid is not None and (len(self.grid) != 2 or min(self.grid) < 1):
                raise ConfigError(f"environment.grid must be [rows, cols], got {self.grid}")
        else:
            if not self.path:
                raise ConfigError("environment.path is required for kind 'file'")
            if not self._resolve(self.path, base_dir).exists():
                raise ConfigError(f"Environment file not found: {self.path}")

    @staticmethod
    def _resolve(path: str, base_dir: Optional[Path]) -> Path:
        p = Path(path)
        if p.is_absolute() or base_dir is None or p.exists():
            return p
        return base_dir / p

    def resolved_frames(self, base_dir: Optional[Path] = None) -> List[Path]:
        return [self._resolve(f, base_dir) for f in self.frames]

    def resolved_path(self, base_dir: Optional[Path] = None) -> Path:
        return self._resolve(self.path, base_dir)

    def gen_spec(self, seed: int, horizon: int) -> EnvGenSpec:
        return EnvGenSpec(
            seed=seed, rows=self.rows, cols=self.cols, horizon=horizon,
            lipschitz_time=self.lipschitz_time, variance=self.variance,
            length_scale=self.length_scale, h=self.h, safe_margin=self.safe_margin,
            noise_std=self.noise_std, max_redraws=self.max_redraws,
        )


@dataclass
class AgentSection:
    """Agent settings shared by every policy."""
    beta: float = 2.0
    p: float = 3.0
    l_s: float = 0.1
    l_t: float = 0.1
    noise_var: float = 1e-6
    record_lower_bound: bool = False
    own_bound: bool = True


@dataclass
class ExperimentConfig:
    """A complete experiment: environment, kernel, agents and run plan."""
    environment: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    kernel: Optional[KernelSpec] = None
    ablation_kernels: Dict[str, KernelSpec] = field(default_factory=dict)
    agent: AgentSection = field(default_factory=AgentSection)
    policies: List[str] = field(default_factory=lambda: [p.value for p in POLICY_ORDER])
    runs: int = 1
    horizon: int = 100
    seed: int = 0
    workers: int = field(default_factory=lambda: Config.WORKERS)
    output_dir: str = field(default_factory=lambda: Config.OUTPUT_DIR)
    export_snapshots: bool = False
    base_dir: Optional[Path] = field(default=None, compare=False, repr=False)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[Path] = None) -> "ExperimentConfig":
        """
        Parse and validate a configuration mapping.

        Args:
            data: Parsed JSON object
            base_dir: Directory relative file paths are resolved against

        Raises:
            ConfigError: On unknown keys, wrong types or invalid values
        """
        data = dict(_strict_fields(cls, data, 'experiment'))
        data.pop('base_dir', None)
        try:
            env = EnvironmentConfig(**_strict_fields(EnvironmentConfig, data.pop('environment', {}), 'environment'))
            agent = AgentSection(**_strict_fields(AgentSection, data.pop('agent', {}), 'agent'))
            kernel = kernel_from_dict(data.pop('kernel')) if data.get('kernel') is not None else None
            data.pop('kernel', None)
            ablations = data.pop('ablation_kernels', {}) or {}
            if not isinstance(ablations, dict):
                raise ConfigError("ablation_kernels must be a mapping")
            ablation_kernels = {name: kernel_from_dict(spec) for name, spec in ablations.items()}
            config = cls(environment=env, kernel=kernel, ablation_kernels=ablation_kernels,
                         agent=agent, base_dir=base_dir, **data)
            config.validate()
        except InvalidKernelError as e:
            raise ConfigError(f"Invalid kernel: {e}") from e
        except TypeError as e:
            raise ConfigError(f"Malformed configuration: {e}") from e
        return config

    def to_dict(self) -> Dict[str, Any]:
        env = {f.name: getattr(self.environment, f.name) for f in fields(EnvironmentConfig)}
        agent = {f.name: getattr(self.agent, f.name) for f in fields(AgentSection)}
        return {
            'environment': env,
            'kernel': kernel_to_dict(self.kernel) if self.kernel is not None else None,
            'ablation_kernels': {name: kernel_to_dict(k) for name, k in sorted(self.ablation_kernels.items())},
            'agent': agent,
            'policies': list(self.policies),
            'runs': self.runs,
            'horizon': self.horizon,
            'seed': self.seed,
            'workers': self.workers,
            'output_dir': self.output_dir,
            'export_snapshots': self.export_snapshots,
        }

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        path = Path(path)
        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"Config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        logger.info(f"Loaded experiment config from {path}")
        return cls.from_dict(data, base_dir=path.parent)

    def save(self, path: Union[str, Path]) -> None:
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)

    def validate(self) -> None:
        if not self.policies:
            raise ConfigError("At least one policy is required")
        for name in self.policies:
            try:
                Policy(name)
            except ValueError as e:
                raise ConfigError(f"Unknown policy {name!r}; expected one of {[p.value for p in POLICY_ORDER]}") from e
        if len(set(self.policies)) != len(self.policies):
            raise ConfigError("Policies must not repeat")
        for name in self.ablation_kernels:
            if name not in (Policy.IGNORE_TIME.value, Policy.NO_CROSS_COV.value):
                raise ConfigError(f"ablation_kernels key {name!r} is not an ablation policy")
        if self.runs < 1:
            raise ConfigError(f"runs must be at least 1, got {self.runs}")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be at least 1, got {self.horizon}")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.kernel is None and any(p != Policy.RANDOM.value for p in self.policies):
            raise ConfigError("A kernel is required for GP-based policies")
        if self.environment.kind == 'terrain' and self.environment.steps is not None \
                and self.environment.steps < self.horizon:
            raise ConfigError("environment.steps must cover the horizon")
        try:
            AgentConfig(beta=self.agent.beta, p=self.agent.p,
                        lipschitz=LipschitzParams(self.agent.l_s, self.agent.l_t),
                        kernel=self.kernel, noise_var=self.agent.noise_var,
                        policy=Policy.RANDOM)
        except ValueError as e:
            raise ConfigError(f"agent: {e}") from e
        self.environment.validate(self.base_dir)

    @property
    def policy_list(self) -> List[Policy]:
        """Selected policies in canonical order."""
        chosen = {Policy(p) for p in self.policies}
        return [p for p in POLICY_ORDER if p in chosen]

    def kernel_for(self, policy: Policy) -> Optional[KernelSpec]:
        if policy.value in self.ablation_kernels:
            return self.ablation_kernels[policy.value]
        if self.kernel is None:
            return None
        if policy is Policy.NO_CROSS_COV:
            return additive_kernel(self.kernel)
        if policy is Policy.IGNORE_TIME:
            return space_kernel(self.kernel)
        return self.kernel

    def agent_config(self, policy: Policy, base_seed: int, run_index: int) -> AgentConfig:
        return AgentConfig(
            policy=policy,
            beta=self.agent.beta,
            p=self.agent.p,
            lipschitz=LipschitzParams(self.agent.l_s, self.agent.l_t),
            kernel=self.kernel_for(policy),
            noise_var=self.agent.noise_var,
            seed=derive_seed(base_seed, run_index, policy_stream(policy)),
            record_lower_bound=self.agent.record_lower_bound,
            own_bound=self.agent.own_bound,
        )
