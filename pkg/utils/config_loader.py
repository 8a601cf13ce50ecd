import copy
import dataclasses
import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from models.degradations import Degradation
from models.network import HEAD, TAIL
from models.task_spec import TaskSpec, TrainSchedule, training_orders, validate_sequence
from utils.exceptions import ValidationError
from utils.logging import log_exception

# Constants
PRECISIONS = {'float32': np.float32, 'float64': np.float64}
KEY_NETWORK = 'network'
KEY_SCHEDULE = 'schedule'
KEY_DATA = 'data'
KEY_TASKS = 'tasks'
KEY_TASK_DEFAULTS = 'task_defaults'
KEY_OUTPUT_DIR = 'output_dir'
HASH_EXCLUDED_KEYS = (KEY_OUTPUT_DIR,)
DEFAULT_OUTPUT_DIR = os.path.join('runs', 'default')

logger = logging.getLogger('cmc_restore.config_loader')


@dataclass(frozen=True)
class NetworkConfig:
    channels: int = 8
    blocks: int = 2
    kernel_size: int = 3
    capacity: int = 5
    key_layer_capacity: Optional[int] = None
    layer_capacities: Dict[str, int] = field(default_factory=dict)
    residual_scale: float = 0.1
    global_residual: bool = True

    def __post_init__(self) -> None:
        if self.channels < 1 or self.blocks < 0 or self.capacity < 1:
            raise ValidationError(f"network: invalid channels/blocks/capacity {self.channels}/{self.blocks}/{self.capacity}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValidationError(f"network: kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.key_layer_capacity is not None and self.key_layer_capacity < 1:
            raise ValidationError(f"network: key_layer_capacity must be >= 1, got {self.key_layer_capacity}")

    def capacity_overrides(self) -> Dict[str, int]:
        """Per-layer capacities; key_layer_capacity applies to the first and last layers."""
        overrides = {}
        if self.key_layer_capacity is not None:
            overrides = {HEAD: self.key_layer_capacity, TAIL: self.key_layer_capacity}
        overrides.update(self.layer_capacities)
        return overrides


@dataclass(frozen=True)
class DataConfig:
    source: str = 'procedural'
    image_size: int = 64
    directory: Optional[str] = None
    eval_count: int = 8
    pool_images: int = 64
    prefetch_workers: int = 0

    def __post_init__(self) -> None:
        if self.eval_count < 1 or self.pool_images < 1 or self.prefetch_workers < 0:
            raise ValidationError("data: eval_count and pool_images must be >= 1, prefetch_workers >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment settings."""
    seed: int = 0
    precision: str = 'float32'
    output_dir: str = DEFAULT_OUTPUT_DIR
    auto_expand_rows: int = 0
    debug_checks: bool = False
    eval_batch_size: int = 16
    rotation: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    data: DataConfig = field(default_factory=DataConfig)
    tasks: Tuple[TaskSpec, ...] = ()

    def __post_init__(self) -> None:
        if self.precision not in PRECISIONS:
            raise ValidationError(f"precision must be one of {sorted(PRECISIONS)}, got '{self.precision}'")
        if self.auto_expand_rows < 0:
            raise ValidationError(f"auto_expand_rows must be >= 0, got {self.auto_expand_rows}")
        if self.eval_batch_size < 1:
            raise ValidationError(f"eval_batch_size must be >= 1, got {self.eval_batch_size}")
        if not self.tasks:
            raise ValidationError("configuration defines no tasks")
        validate_sequence(self.tasks)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


def _field_names(cls) -> List[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _check_keys(data: Dict[str, Any], allowed: List[str], path: str) -> None:
    if not isinstance(data, dict):
        raise ValidationError(f"{path or 'config'} must be an object, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        prefix = f"{path}." if path else ''
        raise ValidationError(f"unknown configuration key(s): {', '.join(prefix + key for key in unknown)}")


def _build(cls, data: Dict[str, Any], path: str, exclude: Tuple[str, ...] = ()):
    allowed = [name for name in _field_names(cls) if name not in exclude]
    _check_keys(data, allowed, path)
    try:
        return cls(**data)
    except TypeError as e:
        raise ValidationError(f"{path}: {e}")


def _task_from_dict(data: Dict[str, Any], defaults: Dict[str, Any], position: int) -> TaskSpec:
    path = f"{KEY_TASKS}[{position - 1}]"
    merged = {**defaults, **data}
    _check_keys(merged, _field_names(TaskSpec), path)
    if merged.get('task_id', position) != position:
        raise ValidationError(f"{path}: task_id {merged['task_id']} does not match its position {position}")
    if 'name' not in merged or 'degradation' not in merged:
        raise ValidationError(f"{path}: every task needs a 'name' and a 'degradation'")
    merged['task_id'] = position
    degradation = merged['degradation']
    if not isinstance(degradation, Degradation):
        merged['degradation'] = Degradation.from_dict(degradation)
    try:
        return TaskSpec(**merged)
    except TypeError as e:
        raise ValidationError(f"{path}: {e}")


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Build an ExperimentConfig, filling defaults.

    Raises:
        ValidationError: Unknown keys at any level (named by path) or invalid values
    """
    top_level = [name for name in _field_names(ExperimentConfig)] + [KEY_TASK_DEFAULTS]
    _check_keys(data, top_level, '')
    data = copy.deepcopy(data)

    defaults = data.pop(KEY_TASK_DEFAULTS, {}) or {}
    _check_keys(defaults, [n for n in _field_names(TaskSpec) if n not in ('task_id', 'name')], KEY_TASK_DEFAULTS)
    tasks = data.pop(KEY_TASKS, None)
    if not isinstance(tasks, list) or not tasks:
        raise ValidationError("config needs a non-empty 'tasks' list")

    return ExperimentConfig(
        network=_build(NetworkConfig, data.pop(KEY_NETWORK, {}), KEY_NETWORK),
        schedule=_build(TrainSchedule, data.pop(KEY_SCHEDULE, {}), KEY_SCHEDULE),
        data=_build(DataConfig, data.pop(KEY_DATA, {}), KEY_DATA),
        tasks=tuple(_task_from_dict(task, defaults, i) for i, task in enumerate(tasks, start=1)),
        **data,
    )


def config_to_dict(config: ExperimentConfig) -> Dict[str, Any]:
    """Every resolved setting as plain JSON types."""
    data = {name: getattr(config, name) for name in _field_names(ExperimentConfig)}
    data[KEY_NETWORK] = dataclasses.asdict(config.network)
    data[KEY_SCHEDULE] = dataclasses.asdict(config.schedule)
    data[KEY_DATA] = dataclasses.asdict(config.data)
    data[KEY_TASKS] = [task.to_dict() for task in config.tasks]
    return data


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON of the resolved config, output directory excluded."""
    data = {k: v for k, v in config_to_dict(config).items() if k not in HASH_EXCLUDED_KEYS}
    canonical = json.dumps(data, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def apply_overrides(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    no_sharing: bool = False,
    fraction: Optional[float] = None,
    rotation: Optional[int] = None,
    output_dir: Optional[str] = None,
) -> ExperimentConfig:
    """
    Command-line overrides, applied before the config hash is taken.

    Raises:
        ValidationError: Rotation index out of range or invalid fraction
    """
    tasks = list(config.tasks)
    if no_sharing:
        tasks = [dataclasses.replace(t, knowledge_sharing=False) for t in tasks]
    if fraction is not None:
        tasks = [dataclasses.replace(t, fraction=fraction) for t in tasks]
    if rotation:
        if not 0 <= rotation < len(tasks):
            raise ValidationError(f"rotation must be in [0, {len(tasks) - 1}], got {rotation}")
        tasks = training_orders(tasks)[rotation]

    changes: Dict[str, Any] = {'tasks': tuple(tasks)}
    if seed is not None:
        changes['seed'] = seed
    if rotation:
        changes['rotation'] = (config.rotation + rotation) % len(tasks)
    if output_dir is not None:
        changes['output_dir'] = output_dir
    return dataclasses.replace(config, **changes)


class ConfigLoader:
    """
    Loads experiment configurations from JSON files.

    Raw file contents are cached per absolute path so repeated loads (e.g. one per seed in a
    comparison study) read the disk once.
    """

    _raw_cache: Dict[str, Dict[str, Any]] = {}
    _cache_lock = threading.Lock()

    @classmethod
    def _load_raw(cls, path: str) -> Dict[str, Any]:
        key = os.path.abspath(path)
        with cls._cache_lock:
            if key in cls._raw_cache:
                return copy.deepcopy(cls._raw_cache[key])
        try:
            logger.debug(f"Loading configuration from {path}")
            with open(path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
        except FileNotFoundError as e:
            log_exception(e)
            raise ValidationError(f"configuration file not found: {path}")
        except json.JSONDecodeError as e:
            log_exception(e)
            raise ValidationError(f"invalid JSON in configuration file {path}: {e}")
        with cls._cache_lock:
            cls._raw_cache[key] = raw
        return copy.deepcopy(raw)

    @classmethod
    def load(cls, path: str) -> ExperimentConfig:
        """
        Load and validate a configuration file.

        Raises:
            ValidationError: Missing file, invalid JSON, unknown keys or invalid values
        """
        config = config_from_dict(cls._load_raw(path))
        logger.info(f"Loaded configuration {path}: {len(config.tasks)} tasks, seed {config.seed}")
        return config

    @classmethod
    def clear_cache(cls) -> None:
        with cls._cache_lock:
            cls._raw_cache.clear()
        logger.debug("Configuration cache cleared")

    @staticmethod
    def write_resolved(config: ExperimentConfig, path: str) -> str:
        """Write every resolved setting, sorted keys, for provenance."""
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(config_to_dict(config), f, indent=2, sort_keys=True)
            f.write('\n')
        return path
