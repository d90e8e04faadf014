import itertools
import json
import os
import typing
from dataclasses import dataclass, field, fields, is_dataclass, asdict
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

load_dotenv()

MODEL_KINDS = ('lasso', 'svm', 'quadratic')
STRATEGIES = ('diffusion_subgradient', 'diffusion_lms', 'sparse_diffusion_lms', 'non_cooperative')
WEIGHT_RULES = ('perron', 'uniform', 'explicit')
THETA_RULES = ('mean_eta', 'scaled_eta')
SHARD_POLICIES = ('round_robin', 'random_equal')
LASSO_POPULATIONS = ('common', 'per_agent')


class ConfigurationError(Exception):
    """Custom exception for configuration-related errors."""
    pass


@dataclass
class TopologyConfig:
    path: str = ""
    generator: str = "geometric"
    n_agents: int = 20
    radius: float = 0.3
    seed: int = 0


@dataclass
class LassoConfig:
    dim: int = 100
    delta: float = 0.005
    sigma_h_sq_range: Tuple[float, float] = (0.5, 1.0)
    sigma_n_sq_range: Tuple[float, float] = (0.001, 0.01)
    sparsity: int = 5
    support_range: Tuple[float, float] = (0.5, 1.5)
    models: str = "common"
    seed: int = 1


@dataclass
class SvmConfig:
    rho: float = 0.002
    dataset_path: str = ""
    test_path: str = ""
    dim: int = 0
    shard_policy: str = "round_robin"
    holdout_fraction: float = 0.2


@dataclass
class QuadraticConfig:
    dim: int = 10
    eta_range: Tuple[float, float] = (0.5, 1.0)
    noise_sq: float = 0.01
    seed: int = 1


@dataclass
class ModelConfig:
    kind: str = "lasso"
    lasso: LassoConfig = field(default_factory=LassoConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    quadratic: QuadraticConfig = field(default_factory=QuadraticConfig)


@dataclass
class WeightsConfig:
    rule: str = "perron"
    values: List[float] = field(default_factory=list)


@dataclass
class RunConfig:
    mu_o: Optional[float] = None
    theta: Optional[float] = None
    theta_rule: str = "mean_eta"
    theta_scale: float = 0.9
    horizon: int = 20000
    record_every: int = 10
    seed: int = 0
    strategy: str = "diffusion_subgradient"
    batch_size: int = 1
    h: float = 1.25
    ensemble: int = 1
    estimate_noise: bool = True


@dataclass
class OracleConfig:
    tolerance: float = 1e-10
    max_iter: int = 100000


@dataclass
class OutputConfig:
    directory: str = "runs"


@dataclass
class LoggingConfig:
    level: str = "INFO"
    file_path: str = "logs/diffusion.log"
    max_file_size: int = 5 * 1024 * 1024  # 5 MB
    backup_count: int = 5


@dataclass
class ExperimentConfig:
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    run: RunConfig = field(default_factory=RunConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)


def _coerce(value: Any, annotation: Any, key: str) -> Any:
    """Convert a raw text/JSON value to the dataclass field type."""
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)][0]
        if value is None or (isinstance(value, str) and value.strip().lower() in ('', 'none', 'null')):
            return None
        return _coerce(value, inner, key)
    if origin in (tuple, list):
        items = value
        if isinstance(value, str):
            items = [item.strip() for item in value.split(',') if item.strip()]
        item_type = args[0] if args else float
        converted = [_coerce(item, item_type, key) for item in items]
        if origin is tuple:
            if len(args) == 2 and args[1] is not Ellipsis and len(converted) != 2:
                raise ConfigurationError(f"{key}: expected two comma-separated values, got {value!r}")
            return tuple(converted)
        return converted
    try:
        if annotation is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ('true', 'yes', '1', 'on'):
                return True
            if text in ('false', 'no', '0', 'off'):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if annotation is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(float(value)) if isinstance(value, str) and 'e' in value.lower() else int(value)
        if annotation is float:
            return float(value)
        if annotation is str:
            return str(value).strip()
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{key}: {e}")
    return value


def update_nested(obj: Any, data: Dict[str, Any], prefix: str = "") -> None:
    hints = typing.get_type_hints(type(obj))
    for key, value in data.items():
        path = f"{prefix}{key}"
        if not hasattr(obj, key):
            raise ConfigurationError(f"{path}: unknown setting")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigurationError(f"{path}: expected a section, got {value!r}")
            update_nested(current, value, prefix=f"{path}.")
        else:
            setattr(obj, key, _coerce(value, hints[key], path))


def parse_key_values(text: str, source: str = '<string>') -> Dict[str, Any]:
    """Parse `section.key = value` lines into a nested dict."""
    nested: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigurationError(f"{source}:{number}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split('=', 1))
        node = nested
        parts = key.split('.')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"{source}:{number}: '{key}' conflicts with an earlier setting")
        node[parts[-1]] = value
    return nested


def _flatten(obj: Any, prefix: str = "") -> List[Tuple[str, Any]]:
    items = []
    for f in fields(obj):
        value = getattr(obj, f.name)
        if isinstance(obj, ModelConfig) and f.name in MODEL_KINDS and f.name != obj.kind:
            continue
        if is_dataclass(value):
            items.extend(_flatten(value, f"{prefix}{f.name}."))
        else:
            items.append((f"{prefix}{f.name}", value))
    return items


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def config_to_text(config: ExperimentConfig) -> str:
    """Every resolved setting in the key=value format; loading it yields an equal config."""
    return "\n".join(f"{key} = {_format_value(value)}" for key, value in _flatten(config)) + "\n"


def validate_config(config: ExperimentConfig, model_sections: Optional[List[str]] = None) -> ExperimentConfig:
    run = config.run
    if config.model.kind not in MODEL_KINDS:
        raise ConfigurationError(f"model.kind: expected one of {MODEL_KINDS}, got '{config.model.kind}'")
    extra = [s for s in (model_sections or []) if s != config.model.kind]
    if extra:
        raise ConfigurationError(f"model: exactly one model section allowed, got settings for "
                                 f"{sorted(set(extra))} with model.kind = {config.model.kind}")
    if run.mu_o is None:
        raise ConfigurationError("run.mu_o: required")
    if run.mu_o <= 0:
        raise ConfigurationError(f"run.mu_o: must be positive, got {run.mu_o}")
    if run.theta is not None and not 0.0 < run.theta < 1.0:
        raise ConfigurationError(f"run.theta: must lie in (0, 1), got {run.theta}")
    if run.theta_rule not in THETA_RULES:
        raise ConfigurationError(f"run.theta_rule: expected one of {THETA_RULES}, got '{run.theta_rule}'")
    if not 0.0 < run.theta_scale <= 1.0:
        raise ConfigurationError(f"run.theta_scale: must lie in (0, 1], got {run.theta_scale}")
    if run.horizon < 0:
        raise ConfigurationError(f"run.horizon: must be >= 0, got {run.horizon}")
    if run.record_every < 1:
        raise ConfigurationError(f"run.record_every: must be >= 1, got {run.record_every}")
    if run.batch_size < 1:
        raise ConfigurationError(f"run.batch_size: must be >= 1, got {run.batch_size}")
    if run.ensemble < 1:
        raise ConfigurationError(f"run.ensemble: must be >= 1, got {run.ensemble}")
    if run.seed < 0:
        raise ConfigurationError(f"run.seed: must be >= 0, got {run.seed}")
    if run.h < 0:
        raise ConfigurationError(f"run.h: must be >= 0, got {run.h}")
    if run.strategy not in STRATEGIES:
        raise ConfigurationError(f"run.strategy: expected one of {STRATEGIES}, got '{run.strategy}'")
    if run.strategy in ('diffusion_lms', 'sparse_diffusion_lms') and config.model.kind != 'lasso':
        raise ConfigurationError(f"run.strategy: {run.strategy} needs model.kind = lasso")

    topology = config.topology
    if not topology.path:
        if topology.n_agents < 1:
            raise ConfigurationError(f"topology.n_agents: must be >= 1, got {topology.n_agents}")
        if topology.generator not in ('geometric', 'ring', 'complete'):
            raise ConfigurationError(f"topology.generator: unknown generator '{topology.generator}'")
        if topology.seed < 0:
            raise ConfigurationError(f"topology.seed: must be >= 0, got {topology.seed}")

    weights = config.weights
    if weights.rule not in WEIGHT_RULES:
        raise ConfigurationError(f"weights.rule: expected one of {WEIGHT_RULES}, got '{weights.rule}'")
    if weights.rule == 'explicit':
        if not weights.values or any(v <= 0 for v in weights.values):
            raise ConfigurationError("weights.values: explicit weights must be a non-empty list of positive numbers")
        if abs(sum(weights.values) - 1.0) > 1e-9:
            raise ConfigurationError(f"weights.values: must sum to 1, got {sum(weights.values)!r}")

    kind = config.model.kind
    if kind == 'lasso':
        lasso = config.model.lasso
        if lasso.dim < 1 or lasso.delta < 0:
            raise ConfigurationError("model.lasso: dim must be >= 1 and delta >= 0")
        if not 0 <= lasso.sparsity <= lasso.dim:
            raise ConfigurationError(f"model.lasso.sparsity: must lie in [0, {lasso.dim}], got {lasso.sparsity}")
        for name in ('sigma_h_sq_range', 'sigma_n_sq_range', 'support_range'):
            low, high = getattr(lasso, name)
            if low > high or low < 0:
                raise ConfigurationError(f"model.lasso.{name}: expected 0 <= low <= high, got ({low}, {high})")
        if lasso.sigma_h_sq_range[0] <= 0:
            raise ConfigurationError("model.lasso.sigma_h_sq_range: regressor variances must be positive")
        if lasso.models not in LASSO_POPULATIONS:
            raise ConfigurationError(f"model.lasso.models: expected one of {LASSO_POPULATIONS}, got '{lasso.models}'")
    elif kind == 'svm':
        svm = config.model.svm
        if svm.rho <= 0:
            raise ConfigurationError(f"model.svm.rho: must be positive, got {svm.rho}")
        if not svm.dataset_path:
            raise ConfigurationError("model.svm.dataset_path: required")
        if svm.shard_policy not in SHARD_POLICIES:
            raise ConfigurationError(f"model.svm.shard_policy: expected one of {SHARD_POLICIES}, got '{svm.shard_policy}'")
        if not 0.0 <= svm.holdout_fraction < 1.0:
            raise ConfigurationError(f"model.svm.holdout_fraction: must lie in [0, 1), got {svm.holdout_fraction}")
    else:
        quadratic = config.model.quadratic
        low, high = quadratic.eta_range
        if quadratic.dim < 1 or low <= 0 or low > high or quadratic.noise_sq < 0:
            raise ConfigurationError("model.quadratic: need dim >= 1, 0 < eta low <= high, noise_sq >= 0")
    return config


class ExperimentConfigManager:
    def __init__(self, config: Optional[ExperimentConfig] = None):
        self.config = config or ExperimentConfig()
        self.model_sections: List[str] = []

    def get_config(self) -> ExperimentConfig:
        return self.config

    def update_config(self, config_dict: Dict[str, Any]):
        model = config_dict.get('model', {})
        if isinstance(model, dict):
            self.model_sections.extend(k for k in model if k in MODEL_KINDS)
        update_nested(self.config, config_dict)

    def save_config(self, filename: str):
        try:
            with open(filename, 'w') as f:
                if filename.endswith('.json'):
                    data = asdict(self.config)
                    for kind in MODEL_KINDS:
                        if kind != self.config.model.kind:
                            data['model'].pop(kind)
                    json.dump(data, f, indent=4)
                else:
                    f.write(config_to_text(self.config))
        except IOError as e:
            raise ConfigurationError(f"Error saving config to file: {e}")

    def load_config(self, filename: str):
        try:
            with open(filename, 'r') as f:
                if filename.endswith('.json'):
                    config_dict = json.load(f)
                else:
                    config_dict = parse_key_values(f.read(), source=filename)
        except (IOError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Error loading config from file: {e}")
        self.update_config(config_dict)

    def apply_environment(self):
        output_root = os.getenv('DIFFUSION_OUTPUT_ROOT')
        if output_root:
            self.config.output.directory = output_root
        log_level = os.getenv('DIFFUSION_LOG_LEVEL')
        if log_level:
            self.config.logging.level = log_level
        log_file = os.getenv('DIFFUSION_LOG_FILE')
        if log_file:
            self.config.logging.file_path = log_file

    def validate_config(self) -> ExperimentConfig:
        return validate_config(self.config, self.model_sections)


def load_config(path: str) -> ExperimentConfig:
    """Read, resolve defaults, apply environment overrides and validate."""
    manager = ExperimentConfigManager()
    manager.load_config(path)
    manager.apply_environment()
    return manager.validate_config()


def load_config_text(text: str) -> ExperimentConfig:
    manager = ExperimentConfigManager()
    manager.update_config(parse_key_values(text))
    return manager.validate_config()


def save_config(config: ExperimentConfig, path: str):
    ExperimentConfigManager(config).save_config(path)


def update_config(config: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    """Apply dotted-key overrides to a deep copy of `config` and revalidate."""
    manager = ExperimentConfigManager()
    update_nested(manager.config, asdict(config))
    nested: Dict[str, Any] = {}
    for key, value in overrides.items():
        node = nested
        parts = key.split('.')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    update_nested(manager.config, nested)
    return validate_config(manager.config)


SWEEP_MODES = ('grid', 'paired')


@dataclass
class SweepSpec:
    base: ExperimentConfig
    parameters: List[Tuple[str, List[str]]]
    mode: str = "grid"
    workers: int = 1


def load_sweep_spec(path: str) -> SweepSpec:
    """Read `base = <config>`, `mode`, `workers` and `sweep.<dotted.path> = v1, v2, ...` lines."""
    try:
        with open(path, 'r') as f:
            lines = f.read().splitlines()
    except IOError as e:
        raise ConfigurationError(f"Error loading sweep spec: {e}")
    settings: Dict[str, str] = {}
    parameters: List[Tuple[str, List[str]]] = []
    for number, raw in enumerate(lines, start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigurationError(f"{path}:{number}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split('=', 1))
        if key.startswith('sweep.'):
            values = [v.strip() for v in value.split(',') if v.strip()]
            if not values:
                raise ConfigurationError(f"{path}:{number}: {key} has no values")
            parameters.append((key[len('sweep.'):], values))
        elif key in ('base', 'mode', 'workers'):
            settings[key] = value
        else:
            raise ConfigurationError(f"{path}:{number}: unknown sweep setting '{key}'")
    if 'base' not in settings:
        raise ConfigurationError(f"{path}: base: required")
    if not parameters:
        raise ConfigurationError(f"{path}: at least one sweep.<parameter> line is required")
    mode = settings.get('mode', 'grid')
    if mode not in SWEEP_MODES:
        raise ConfigurationError(f"{path}: mode: expected one of {SWEEP_MODES}, got '{mode}'")
    workers = _coerce(settings.get('workers', '1'), int, 'workers')
    if workers < 1:
        raise ConfigurationError(f"{path}: workers: must be >= 1, got {workers}")
    base_path = settings['base']
    if not os.path.isabs(base_path):
        base_path = os.path.join(os.path.dirname(os.path.abspath(path)), base_path)
    return SweepSpec(base=load_config(base_path), parameters=parameters, mode=mode, workers=workers)


def sweep_points(spec: SweepSpec) -> List[Tuple[Dict[str, str], ExperimentConfig]]:
    """Every (overrides, config) point of the sweep; each config is validated."""
    names = [name for name, _ in spec.parameters]
    value_lists = [values for _, values in spec.parameters]
    if spec.mode == 'paired':
        lengths = {len(values) for values in value_lists}
        if len(lengths) != 1:
            raise ConfigurationError(f"paired sweep needs equal-length value lists, got lengths {sorted(lengths)}")
        combos = list(zip(*value_lists))
    else:
        combos = list(itertools.product(*value_lists))
    points = []
    for combo in combos:
        overrides = dict(zip(names, combo))
        points.append((overrides, update_config(spec.base, overrides)))
    return points
