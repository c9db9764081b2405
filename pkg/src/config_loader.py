"""
Configuration loader for experiment presets and experiment files.

Loads config/presets.yaml and turns YAML files, preset names and
`--key=value` overrides into a validated ExperimentConfig.
"""

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import yaml

from .cbp import CbpConfig, UtilityKind
from .errors import ConfigError
from .network import ActivationKind


PROBLEMS = ('scr', 'pmnist')
LEARNERS = ('bp', 'linear_baseline')
OPTIMIZERS = ('sgd', 'adam')
MITIGATIONS = ('l2', 'shrink_perturb', 'dropout', 'cbp')
FORMATS = ('csv', 'json')

MNIST_TRAIN_SIZE = 60000


class ConfigLoader:
    """
    Loads and provides access to presets and global settings.

    Usage:
        config = ConfigLoader()
        preset = config.get_preset('scr-small')
        workers = config.get_setting('workers', 1)
    """

    def __init__(self, config_path: Optional[str] = None):
        """
        Initialize config loader.

        Args:
            config_path: Path to presets.yaml. If None, uses default location.
        """
        if config_path is None:
            # Default: config/presets.yaml relative to project root
            project_root = Path(__file__).parent.parent
            config_path = project_root / 'config' / 'presets.yaml'

        self.config_path = Path(config_path)
        self._config = None

    def _load(self) -> Dict[str, Any]:
        """Load configuration from YAML file"""
        if self._config is None:
            if not self.config_path.exists():
                raise ConfigError('presets', f"config file not found: {self.config_path}")

            with open(self.config_path, 'r', encoding='utf-8') as f:
                self._config = yaml.safe_load(f) or {}

        return self._config

    def get_presets(self) -> Dict[str, Dict[str, Any]]:
        return self._load().get('presets', {})

    def get_preset(self, name: str) -> Optional[Dict[str, Any]]:
        return self.get_presets().get(name)

    def get_preset_names(self) -> List[str]:
        return list(self.get_presets().keys())

    def get_settings(self) -> Dict[str, Any]:
        return self._load().get('settings', {})

    def get_setting(self, key: str, default: Any = None) -> Any:
        return self.get_settings().get(key, default)


# Singleton instance for convenience
_config_loader: Optional[ConfigLoader] = None


def get_config() -> ConfigLoader:
    """Get the global config loader instance"""
    global _config_loader
    if _config_loader is None:
        _config_loader = ConfigLoader()
    return _config_loader


def resolve_data_dir(explicit: Optional[str] = None) -> Path:
    """MNIST directory: explicit value, then PLASTICITY_DATA_DIR, then settings"""
    data_dir = explicit or os.getenv("PLASTICITY_DATA_DIR") or get_config().get_setting("data_dir", "data/mnist")
    return Path(data_dir)


@dataclass
class ExperimentConfig:
    """
    Everything that determines an experiment's output.

    Problem sizes default to the published scale; the presets in
    config/presets.yaml shrink them to desk scale.
    """
    name: str = 'experiment'
    problem: str = 'scr'
    learner: str = 'bp'
    optimizer: str = 'sgd'
    mitigations: List[str] = field(default_factory=list)

    # optimizer
    step_size: float = 0.01
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    # regularizers
    weight_decay: float = 0.0
    perturb_variance: float = 0.0
    noise_after_step: bool = True
    dropout_p: float = 0.0

    # continual backpropagation
    replacement_rate: float = 1e-4
    decay_rate: float = 0.99
    maturity_threshold: int = 100
    utility: str = 'overall'

    # network
    hidden_sizes: List[int] = field(default_factory=lambda: [5])
    activation: str = 'tanh'

    # runs
    n_runs: int = 10
    base_seed: int = 0
    bin_size: int = 40000
    workers: int = 1
    extra_runs: int = 0

    # diagnostics
    diagnostics: bool = True
    probe_size: int = 2000
    saturation_epsilon: float = 0.01
    probe_layers: Optional[List[int]] = None

    # slowly-changing regression
    scr_m: int = 21
    scr_f: int = 15
    scr_n: int = 100
    scr_flip_period: int = 10000
    scr_beta: float = 0.7
    scr_output_bias: bool = True
    total_steps: int = 3000000

    # permuted MNIST
    n_tasks: int = 800
    examples_per_task: int = MNIST_TRAIN_SIZE
    with_replacement: bool = False
    data_dir: Optional[str] = None

    # output
    output_dir: str = 'results'
    format: str = 'csv'

    def __post_init__(self):
        validate_config(self)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'ExperimentConfig':
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
        return cls(**{key: coerce_value(key, value) for key, value in data.items()})

    def replace(self, **changes) -> 'ExperimentConfig':
        data = self.to_dict()
        data.update(changes)
        return ExperimentConfig.from_dict(data)

    @property
    def uses_cbp(self) -> bool:
        return 'cbp' in self.mitigations

    def cbp_config(self) -> Optional[CbpConfig]:
        if not self.uses_cbp:
            return None
        return CbpConfig(self.replacement_rate, self.decay_rate, self.maturity_threshold,
                         UtilityKind(self.utility))

    def effective_weight_decay(self) -> float:
        if 'l2' in self.mitigations or 'shrink_perturb' in self.mitigations:
            return self.weight_decay
        return 0.0

    def effective_perturb_variance(self) -> float:
        return self.perturb_variance if 'shrink_perturb' in self.mitigations else 0.0

    def effective_dropout(self) -> float:
        return self.dropout_p if 'dropout' in self.mitigations else 0.0

    def network_hidden_sizes(self) -> List[int]:
        return [] if self.learner == 'linear_baseline' else list(self.hidden_sizes)


_FLOAT_KEYS = {
    'step_size', 'momentum', 'beta1', 'beta2', 'epsilon', 'weight_decay',
    'perturb_variance', 'dropout_p', 'replacement_rate', 'decay_rate',
    'saturation_epsilon', 'scr_beta',
}
_INT_KEYS = {
    'maturity_threshold', 'n_runs', 'extra_runs', 'base_seed', 'bin_size', 'workers', 'probe_size',
    'scr_m', 'scr_f', 'scr_n', 'scr_flip_period', 'total_steps', 'n_tasks',
    'examples_per_task',
}
_BOOL_KEYS = {'noise_after_step', 'diagnostics', 'scr_output_bias', 'with_replacement'}
_INT_LIST_KEYS = {'hidden_sizes', 'probe_layers'}
_STR_LIST_KEYS = {'mitigations'}
_OPTIONAL_KEYS = {'probe_layers', 'data_dir'}


def coerce_value(key: str, value: Any) -> Any:
    """Convert a YAML or command-line value to the type of field `key`"""
    if value is None and key in _OPTIONAL_KEYS:
        return None
    try:
        if key in _FLOAT_KEYS:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if key in _INT_KEYS:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(float(value)) if isinstance(value, str) else int(value)
        if key in _BOOL_KEYS:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ('true', 'false', 'yes', 'no'):
                return value.lower() in ('true', 'yes')
            raise ValueError(value)
        if key in _INT_LIST_KEYS:
            if isinstance(value, (int, str)) and not isinstance(value, bool):
                value = [value]
            return [int(v) for v in value]
        if key in _STR_LIST_KEYS:
            if value is None:
                return []
            if isinstance(value, str):
                value = [v for v in value.split(',') if v.strip()]
            return [str(v).strip() for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"invalid value {value!r}")


def _check_range(cfg: ExperimentConfig, key: str, ok: bool, expected: str):
    if not ok:
        raise ConfigError(key, f"must be {expected}, got {getattr(cfg, key)!r}")


def validate_config(cfg: ExperimentConfig):
    """Range and combination checks; each failure names the offending field"""
    _check_range(cfg, 'problem', cfg.problem in PROBLEMS, f"one of {PROBLEMS}")
    _check_range(cfg, 'learner', cfg.learner in LEARNERS, f"one of {LEARNERS}")
    _check_range(cfg, 'optimizer', cfg.optimizer in OPTIMIZERS, f"one of {OPTIMIZERS}")
    for m in cfg.mitigations:
        if m not in MITIGATIONS:
            raise ConfigError('mitigations', f"unknown mitigation '{m}', expected a subset of {MITIGATIONS}")
    if 'cbp' in cfg.mitigations and 'dropout' in cfg.mitigations:
        raise ConfigError('mitigations', "cbp and dropout cannot be combined")
    if 'cbp' in cfg.mitigations and cfg.learner == 'linear_baseline':
        raise ConfigError('mitigations', "cbp needs hidden units; the linear baseline has none")
    if 'dropout' in cfg.mitigations and cfg.learner == 'linear_baseline':
        raise ConfigError('mitigations', "dropout needs hidden units; the linear baseline has none")

    _check_range(cfg, 'step_size', cfg.step_size > 0.0, "positive")
    _check_range(cfg, 'momentum', 0.0 <= cfg.momentum < 1.0, "in [0, 1)")
    _check_range(cfg, 'beta1', 0.0 <= cfg.beta1 < 1.0, "in [0, 1)")
    _check_range(cfg, 'beta2', 0.0 <= cfg.beta2 < 1.0, "in [0, 1)")
    _check_range(cfg, 'epsilon', cfg.epsilon > 0.0, "positive")
    _check_range(cfg, 'weight_decay', cfg.weight_decay >= 0.0, ">= 0")
    _check_range(cfg, 'perturb_variance', cfg.perturb_variance >= 0.0, ">= 0")
    _check_range(cfg, 'dropout_p', 0.0 <= cfg.dropout_p < 1.0, "in [0, 1)")
    _check_range(cfg, 'replacement_rate', cfg.replacement_rate >= 0.0, ">= 0")
    _check_range(cfg, 'decay_rate', 0.0 <= cfg.decay_rate < 1.0, "in [0, 1)")
    _check_range(cfg, 'maturity_threshold', cfg.maturity_threshold >= 0, ">= 0")
    _check_range(cfg, 'utility', cfg.utility in {u.value for u in UtilityKind},
                 f"one of {[u.value for u in UtilityKind]}")

    _check_range(cfg, 'hidden_sizes', all(n >= 1 for n in cfg.hidden_sizes), "positive layer widths")
    if cfg.learner == 'bp':
        _check_range(cfg, 'hidden_sizes', len(cfg.hidden_sizes) >= 1, "at least one hidden layer for bp")
    ActivationKind.parse(cfg.activation)

    _check_range(cfg, 'n_runs', cfg.n_runs >= 1, ">= 1")
    _check_range(cfg, 'extra_runs', cfg.extra_runs >= 0, ">= 0")
    _check_range(cfg, 'base_seed', cfg.base_seed >= 0, ">= 0")
    _check_range(cfg, 'bin_size', cfg.bin_size >= 1, ">= 1")
    _check_range(cfg, 'workers', cfg.workers >= 1, ">= 1")
    _check_range(cfg, 'probe_size', cfg.probe_size >= 1, ">= 1")
    _check_range(cfg, 'saturation_epsilon', cfg.saturation_epsilon > 0.0, "positive")
    if cfg.probe_layers is not None:
        n_hidden = len(cfg.network_hidden_sizes())
        _check_range(cfg, 'probe_layers', all(0 <= l < n_hidden for l in cfg.probe_layers),
                     f"hidden layer indices below {n_hidden}")

    _check_range(cfg, 'scr_m', cfg.scr_m >= 1, ">= 1")
    _check_range(cfg, 'scr_f', 0 <= cfg.scr_f <= cfg.scr_m, f"in [0, scr_m={cfg.scr_m}]")
    _check_range(cfg, 'scr_n', cfg.scr_n >= 1, ">= 1")
    _check_range(cfg, 'scr_flip_period', cfg.scr_flip_period >= 1, ">= 1")
    _check_range(cfg, 'scr_beta', 0.0 <= cfg.scr_beta <= 1.0, "in [0, 1]")
    _check_range(cfg, 'total_steps', cfg.total_steps >= 1, ">= 1")

    _check_range(cfg, 'n_tasks', cfg.n_tasks >= 1, ">= 1")
    _check_range(cfg, 'examples_per_task', cfg.examples_per_task >= 1, ">= 1")
    if not cfg.with_replacement:
        _check_range(cfg, 'examples_per_task', cfg.examples_per_task <= MNIST_TRAIN_SIZE,
                     f"<= {MNIST_TRAIN_SIZE} without with_replacement")
    _check_range(cfg, 'format', cfg.format in FORMATS, f"one of {FORMATS}")


def parse_overrides(args: Sequence[str]) -> Dict[str, Any]:
    """Turn ['--step_size=0.01', '--hidden-sizes=[100,100]'] into a dict"""
    overrides = {}
    for arg in args:
        if not arg.startswith('--') or '=' not in arg:
            raise ConfigError(arg, "overrides must look like --key=value")
        key, _, raw = arg[2:].partition('=')
        key = key.replace('-', '_')
        try:
            overrides[key] = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError:
            overrides[key] = raw
    return overrides


def _env_defaults(loader: ConfigLoader) -> Dict[str, Any]:
    defaults = {}
    results_dir = os.getenv('PLASTICITY_RESULTS_DIR') or loader.get_setting('results_dir')
    if results_dir:
        defaults['output_dir'] = results_dir
    workers = os.getenv('PLASTICITY_WORKERS') or loader.get_setting('workers')
    if workers:
        defaults['workers'] = workers
    return defaults


def read_document(source: Optional[Union[str, Path]], loader: Optional[ConfigLoader] = None) -> Dict[str, Any]:
    """
    Resolve a config source into a flat mapping.

    Args:
        source: Path to a YAML file, or the name of a preset, or None

    Returns:
        Mapping with any `preset:` reference already expanded
    """
    loader = loader or get_config()
    if source is None:
        return {}

    path = Path(source)
    if path.exists():
        with open(path, 'r', encoding='utf-8') as f:
            document = yaml.safe_load(f) or {}
        if not isinstance(document, dict):
            raise ConfigError(str(path), "config file must contain a mapping")
    else:
        preset = loader.get_preset(str(source))
        if preset is None:
            raise ConfigError('config', f"'{source}' is neither a file nor a preset "
                                        f"(presets: {', '.join(loader.get_preset_names())})")
        document = dict(preset)

    preset_name = document.pop('preset', None)
    if preset_name is not None:
        base = loader.get_preset(str(preset_name))
        if base is None:
            raise ConfigError('preset', f"unknown preset '{preset_name}'")
        merged = dict(base)
        grid = {**merged.pop('grid', {}), **document.pop('grid', {})}
        merged.update(document)
        if grid:
            merged['grid'] = grid
        document = merged
    return document


def parse_config(source: Optional[Union[str, Path]] = None,
                 overrides: Optional[Union[Mapping[str, Any], Sequence[str]]] = None,
                 loader: Optional[ConfigLoader] = None) -> ExperimentConfig:
    config, grid = parse_sweep_config(source, overrides, loader)
    if grid:
        raise ConfigError('grid', "grids are only accepted by the sweep command")
    return config


def parse_sweep_config(source: Optional[Union[str, Path]] = None,
                       overrides: Optional[Union[Mapping[str, Any], Sequence[str]]] = None,
                       loader: Optional[ConfigLoader] = None
                       ) -> Tuple[ExperimentConfig, Dict[str, List[Any]]]:
    """Base config plus the `grid:` mapping of key -> list of values"""
    loader = loader or get_config()
    document = read_document(source, loader)
    if overrides is not None and not isinstance(overrides, Mapping):
        overrides = parse_overrides(overrides)

    data = _env_defaults(loader)
    if source is not None:
        data['name'] = Path(str(source)).stem
    data.update(document)
    data.update(overrides or {})

    grid = data.pop('grid', None) or {}
    if not isinstance(grid, dict):
        raise ConfigError('grid', "must map configuration keys to lists of values")
    known = {f.name for f in fields(ExperimentConfig)}
    for key, values in grid.items():
        if key not in known:
            raise ConfigError(key, "unknown configuration key in grid")
        if not isinstance(values, list) or not values:
            raise ConfigError(key, "grid values must be a non-empty list")
    return ExperimentConfig.from_dict(data), grid


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
