import os
import math
import yaml
import logging
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ValidationError, model_validator

from evroad.core.errors import ConfigError

# Singleton instance of config
_config_instance = None

DEFAULT_CONFIG_FILE = "config.yaml"
SECTIONS = ("model", "ssl", "finetune")


#-------------------------------------------------
# Experiment configs
#-------------------------------------------------
class ModelConfig(BaseModel):
    """Architecture hyperparameters; the tensor name set is a pure function of these."""
    n: int = 50
    d_e: int = 12
    n_heads: int = 4
    n_blocks: int = 4
    block_ffn: List[int] = [24, 12]
    trunk_ffn: List[int] = [2048, 1024]
    head: Literal["ssl_classifier", "segmentation_head"] = "ssl_classifier"
    pooling: Literal["mean"] = "mean"

    @model_validator(mode="after")
    def _check_dims(self):
        if self.n < 1 or self.d_e < 1 or self.n_heads < 1:
            raise ConfigError(f"n, d_e and n_heads must be >= 1 (got {self.n}, {self.d_e}, {self.n_heads})")
        if self.n_blocks < 0:
            raise ConfigError(f"n_blocks must be >= 0, got {self.n_blocks}")
        if self.d_e % self.n_heads != 0:
            raise ConfigError(f"d_e={self.d_e} is not divisible by n_heads={self.n_heads}")
        if not self.block_ffn or any(d < 1 for d in self.block_ffn):
            raise ConfigError(f"block_ffn dims must be >= 1, got {self.block_ffn}")
        if self.block_ffn[-1] != self.d_e:
            raise ConfigError(f"block_ffn must end at d_e={self.d_e} for the residual add, got {self.block_ffn}")
        if not self.trunk_ffn or any(d < 1 for d in self.trunk_ffn):
            raise ConfigError(f"trunk_ffn dims must be >= 1, got {self.trunk_ffn}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_e // self.n_heads

    @property
    def head_dims(self) -> List[int]:
        if self.head == "ssl_classifier":
            return [2]
        return [128, 2]


class SslConfig(BaseModel):
    threshold_mode: Literal["median", "fixed"] = "median"
    threshold: Optional[float] = None
    batch_size: int = 32
    epochs: int = 20
    lr: float = 0.001
    weight_decay: float = 0.01
    seed: int = 0

    @model_validator(mode="after")
    def _check_threshold(self):
        if self.threshold_mode == "fixed":
            if self.threshold is None or not (0.0 < self.threshold < math.log(2.0)):
                raise ConfigError(f"fixed threshold must lie in (0, ln 2), got {self.threshold}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        return self


class TrainConfig(BaseModel):
    batch_size: int = 32
    epochs: int = 10
    lr: float = 0.001
    weight_decay: float = 0.01
    max_samples: Optional[int] = 256
    seed: int = 0

    @model_validator(mode="after")
    def _check_schedule(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.max_samples is not None and self.max_samples < 1:
            raise ConfigError(f"max_samples must be >= 1, got {self.max_samples}")
        return self


#-------------------------------------------------
# Process settings
#-------------------------------------------------
class GeneralSettings(BaseModel):
    log_level: str = "INFO"
    log_dir: str = "logs"
    threads: int = 1
    precision: Literal["float64", "float32"] = "float64"


class ServerSettings(BaseModel):
    host: str = "0.0.0.0"
    port: int = 7700
    checkpoint: Optional[str] = None


class Settings(BaseModel):
    general: GeneralSettings = GeneralSettings()
    model: ModelConfig = ModelConfig()
    ssl: SslConfig = SslConfig()
    finetune: TrainConfig = TrainConfig()
    server: ServerSettings = ServerSettings()

    def get_all(self) -> Dict[str, Any]:
        """Get entire configuration as dictionary"""
        return self.model_dump()


def load_settings(config_file: str = DEFAULT_CONFIG_FILE) -> Settings:
    """Load built-in defaults from the YAML file next to the package."""
    if os.path.isabs(config_file):
        config_path = config_file
    else:
        config_path = os.path.join(os.path.dirname(os.path.dirname(__file__)), 'config', config_file)

    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f) or {}
        logging.debug(f"Configuration loaded from {config_path}")
    except FileNotFoundError:
        logging.error(f"Configuration file not found: {config_path}")
        data = {}
    except yaml.YAMLError as e:
        logging.error(f"Error parsing configuration file: {e}")
        data = {}

    try:
        return Settings.model_validate(data)
    except ValidationError as e:
        logging.error(f"Invalid configuration in {config_path}, using defaults: {e}")
        return Settings()


def get_config(config_file: str = None) -> Settings:
    """Get singleton instance of Settings"""
    global _config_instance

    if _config_instance is None or config_file is not None:
        _config_instance = load_settings(config_file or DEFAULT_CONFIG_FILE)

    return _config_instance


#-------------------------------------------------
# Flat key=value files
#-------------------------------------------------
def read_kv_file(path: str) -> Dict[str, str]:
    """Parse a flat ``key=value`` file; ``#`` comments and blank lines are skipped."""
    values = {}
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line or line.startswith('#'):
                    continue
                if '=' not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, value = line.split('=', 1)
                values[key.strip()] = value.strip()
    except UnicodeDecodeError as e:
        raise ConfigError(f"{path}: not UTF-8 text: {e}") from e
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    return values


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def write_kv_file(path: str, config: BaseModel, prefix: str = "") -> None:
    lines = [f"{prefix}{key}={_format_value(value)}" for key, value in config.model_dump().items()]
    with open(path, 'w', encoding='utf-8') as f:
        f.write("\n".join(lines) + "\n")


def _parse_value(model: type, key: str, value: Any) -> Any:
    if not isinstance(value, str):
        return value
    if value.lower() in ("none", "null"):
        return None
    annotation = str(model.model_fields[key].annotation)
    if "List" in annotation or "list" in annotation:
        return [int(v) for v in value.split(",") if v.strip()]
    return value


def _route_key(key: str) -> Optional[tuple]:
    if "." in key:
        section, field = key.split(".", 1)
        return (section, field) if section in SECTIONS else None
    for section in SECTIONS:
        if key in Settings.model_fields[section].annotation.model_fields:
            return section, key
    return None


def apply_overrides(settings: Settings, overrides: Dict[str, Any]) -> Settings:
    """Return a copy of settings with flat overrides applied to model/ssl/finetune."""
    updates = {section: getattr(settings, section).model_dump() for section in SECTIONS}
    for key, value in overrides.items():
        if value is None:
            continue
        route = _route_key(key)
        if route is None:
            raise ConfigError(f"Unknown configuration key: {key}")
        section, field = route
        model_cls = Settings.model_fields[section].annotation
        if field not in model_cls.model_fields:
            raise ConfigError(f"Unknown configuration key: {key}")
        try:
            updates[section][field] = _parse_value(model_cls, field, value)
        except ValueError as e:
            raise ConfigError(f"Invalid value for {key}: {value!r}") from e

    try:
        return settings.model_copy(update={
            "model": ModelConfig.model_validate(updates["model"]),
            "ssl": SslConfig.model_validate(updates["ssl"]),
            "finetune": TrainConfig.model_validate(updates["finetune"]),
        })
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def resolve_configs(config_file: Optional[str] = None, flags: Optional[Dict[str, Any]] = None) -> Settings:
    """CLI flags > key=value config file > YAML defaults."""
    settings = get_config()
    if config_file:
        settings = apply_overrides(settings, read_kv_file(config_file))
    if flags:
        settings = apply_overrides(settings, flags)
    return settings


def load_model_config(path: str) -> ModelConfig:
    """Read a checkpoint's sidecar ``key=value`` file into a ModelConfig."""
    values = read_kv_file(path)
    parsed = {}
    for key, value in values.items():
        field = key.split(".", 1)[1] if key.startswith("model.") else key
        if field not in ModelConfig.model_fields:
            raise ConfigError(f"{path}: unknown model key {key}")
        parsed[field] = _parse_value(ModelConfig, field, value)
    try:
        return ModelConfig.model_validate(parsed)
    except ValidationError as e:
        raise ConfigError(f"{path}: invalid model config: {e}") from e
