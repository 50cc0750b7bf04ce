"""
Experiment configuration.

Config files are plain `KEY=value` lines (the .env format) read through
python-decouple; every key is optional and falls back to the calibrated
defaults below. Values from the process environment take precedence over the
file, as decouple does for settings.
"""
import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Tuple

from decouple import Config, RepositoryEmpty, RepositoryEnv, UndefinedValueError
from django.conf import settings

from .control import MotionLimits
from .core import ChassisGeometry, ChassisKind
from .learning import TrainConfig
from .plant import PlantParams
from ..exceptions import ConfigInvalid

logger = logging.getLogger(__name__)

EXPERIMENTS = ('A', 'B', 'C')
DEFAULT_WAYPOINTS = ((500.0, 500.0), (500.0, 900.0), (1300.0, 900.0), (500.0, 900.0), (500.0, 500.0))

PLANT_KEYS = {
    'MOTOR_GAIN': 'motor_gain',
    'MOTOR_TAU': 'motor_tau',
    'WHEEL_SPEED_MAX': 'wheel_speed_max',
    'SLIP_LONG': 'slip_long',
    'SLIP_LAT': 'slip_lat',
    'COULOMB_FRICTION': 'coulomb_friction',
    'VISCOUS_FRICTION': 'viscous_friction',
    'PROCESS_NOISE_SIGMA': 'process_noise_sigma',
    'STICTION_SPEED': 'stiction_speed',
    'ACCEL_NOISE_SIGMA': 'accel_noise_sigma',
    'GYRO_NOISE_SIGMA': 'gyro_noise_sigma',
    'MAG_NOISE_SIGMA': 'mag_noise_sigma',
    'ENCODER_NOISE_SIGMA': 'encoder_noise_sigma',
    'PIXEL_NOISE_SIGMA': 'pixel_noise_sigma',
    'CAMERA_THETA_SIGMA': 'camera_theta_sigma',
}

TRAIN_KEYS = {
    'LEARNING_RATE': ('learning_rate', float),
    'BATCH_SIZE': ('batch_size', int),
    'EPOCHS_PER_ROUND': ('epochs_per_round', int),
    'CONVERGENCE_TOL': ('convergence_tol', float),
    'RETRAIN_EVERY': ('retrain_every', int),
    'REPLAY_CAPACITY': ('replay_capacity', int),
    'HIDDEN_UNITS': ('hidden_units', int),
}

LIMIT_KEYS = {
    'SETPOINT_HORIZON_MS': 'setpoint_horizon_ms',
    'MAX_SPEED': 'max_speed',
    'ACCEL_LIMIT': 'accel_limit',
    'HEADING_GAIN': 'heading_gain',
}


def parse_waypoints(text: str) -> Tuple[Tuple[float, float], ...]:
    """'500:500,500:900' -> ((500.0, 500.0), (500.0, 900.0))"""
    points = []
    for chunk in text.split(','):
        chunk = chunk.strip()
        if not chunk:
            continue
        u, sep, v = chunk.partition(':')
        if not sep:
            raise ValueError(f"waypoint '{chunk}' is not u:v")
        points.append((float(u), float(v)))
    return tuple(points)


def format_waypoints(waypoints) -> str:
    return ','.join(f"{u:g}:{v:g}" for u, v in waypoints)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = 'A'
    seed: int = field(default_factory=lambda: getattr(settings, 'TESTBED_DEFAULT_SEED', 7))
    waypoints: Tuple[Tuple[float, float], ...] = DEFAULT_WAYPOINTS
    threshold: float = 30.0
    epsilon_p: float = 0.2
    limits: MotionLimits = field(default_factory=MotionLimits)
    tick_budget: int = 12000
    chassis: ChassisKind = ChassisKind.OMNI4
    plant: PlantParams = field(default_factory=PlantParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    model_path: Optional[str] = None
    lockstep: bool = True
    repeats: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigInvalid(f"EXPERIMENT must be one of {', '.join(EXPERIMENTS)}, got {self.experiment!r}")
        if not self.waypoints:
            raise ConfigInvalid("WAYPOINTS must list at least one u:v pair")
        if self.tick_budget < 1:
            raise ConfigInvalid("TICK_BUDGET must be at least 1")
        if self.threshold <= 0:
            raise ConfigInvalid("THRESHOLD_PX must be positive")
        if not 0.0 < self.epsilon_p <= 1.0:
            raise ConfigInvalid("EPSILON_P must lie in (0, 1]")
        if self.repeats < 1:
            raise ConfigInvalid("REPEATS must be at least 1")

    @property
    def geometry(self) -> ChassisGeometry:
        return ChassisGeometry(kind=self.chassis)

    def with_changes(self, **changes) -> 'ExperimentConfig':
        return replace(self, **changes)

    def to_env(self) -> str:
        """Render as a config file that load_config reads back to an equal config"""
        lines = [
            f"EXPERIMENT={self.experiment}",
            f"SEED={self.seed}",
            f"WAYPOINTS={format_waypoints(self.waypoints)}",
            f"THRESHOLD_PX={self.threshold!r}",
            f"EPSILON_P={self.epsilon_p!r}",
            f"TICK_BUDGET={self.tick_budget}",
            f"CHASSIS={self.chassis.value}",
            f"LOCKSTEP={self.lockstep}",
            f"REPEATS={self.repeats}",
        ]
        lines += [f"{key}={getattr(self.limits, attr)!r}" for key, attr in LIMIT_KEYS.items()]
        lines += [f"{key}={getattr(self.plant, attr)!r}" for key, attr in PLANT_KEYS.items()]
        lines += [f"{key}={getattr(self.train, attr)!r}" for key, (attr, _) in TRAIN_KEYS.items()]
        if self.model_path:
            lines.append(f"MODEL_PATH={self.model_path}")
        return '\n'.join(lines) + '\n'


def _read(source: Config, key: str, default, cast):
    try:
        return source(key, default=default, cast=cast)
    except (ValueError, TypeError, UndefinedValueError) as e:
        raise ConfigInvalid(f"{key}: {e}") from e


def load_config(path: Optional[str] = None, **overrides) -> ExperimentConfig:
    """
    Build an ExperimentConfig from a key-value file.

    Keyword overrides (experiment, seed, ...) win over the file.
    """
    if path is None:
        source = Config(RepositoryEmpty())
    else:
        if not os.path.isfile(path):
            raise ConfigInvalid(f"Config file not found: {path}")
        source = Config(RepositoryEnv(path))

    base = ExperimentConfig()
    chassis_name = _read(source, 'CHASSIS', base.chassis.value, str).lower()
    try:
        chassis = ChassisKind(chassis_name)
    except ValueError:
        raise ConfigInvalid(f"CHASSIS: unknown chassis '{chassis_name}'")

    try:
        waypoints = parse_waypoints(_read(source, 'WAYPOINTS', format_waypoints(base.waypoints), str))
    except ValueError as e:
        raise ConfigInvalid(f"WAYPOINTS: {e}") from e

    try:
        plant = PlantParams(**{
            attr: _read(source, key, getattr(base.plant, attr), float) for key, attr in PLANT_KEYS.items()
        })
        train = TrainConfig(**{
            attr: _read(source, key, getattr(base.train, attr), cast) for key, (attr, cast) in TRAIN_KEYS.items()
        })
    except ValueError as e:
        raise ConfigInvalid(str(e)) from e
    limits = MotionLimits(**{
        attr: _read(source, key, getattr(base.limits, attr), float) for key, attr in LIMIT_KEYS.items()
    })

    values = dict(
        experiment=_read(source, 'EXPERIMENT', base.experiment, str).upper(),
        seed=_read(source, 'SEED', base.seed, int),
        waypoints=waypoints,
        threshold=_read(source, 'THRESHOLD_PX', base.threshold, float),
        epsilon_p=_read(source, 'EPSILON_P', base.epsilon_p, float),
        limits=limits,
        tick_budget=_read(source, 'TICK_BUDGET', base.tick_budget, int),
        chassis=chassis,
        plant=plant,
        train=train,
        model_path=_read(source, 'MODEL_PATH', '', str) or None,
        lockstep=_read(source, 'LOCKSTEP', base.lockstep, _as_bool),
        repeats=_read(source, 'REPEATS', base.repeats, int),
    )
    values.update({k: v for k, v in overrides.items() if v is not None})
    config = ExperimentConfig(**values)
    logger.debug(f"Loaded experiment config from {path or 'defaults'}: {config.experiment} seed={config.seed}")
    return config


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ('1', 'true', 'yes', 'on'):
        return True
    if text in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {value!r}")
