import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Type

from pydantic import BaseModel, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import ConfigError
from app.schemas.config import RunConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    # App Settings
    APP_NAME: str = "VARAN"
    SHOW_PROGRESS: bool = False

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # Gradient suite
    GRAD_CHECK_SEEDS: int = 50
    GRAD_CHECK_STEP: float = 1e-6
    GRAD_CHECK_TOLERANCE: float = 1e-5

    model_config = SettingsConfigDict(
        env_file=".env", env_prefix="VARAN_", case_sensitive=True, extra="ignore"
    )


settings = Settings()


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        location = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{location}: {err['msg']}")
    return "; ".join(parts)


def parse_run_config(document: Dict[str, Any]) -> RunConfig:
    """
    Validate a raw configuration document.

    Raises:
        ConfigError: If any key is unknown or any value is out of range
    """
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Invalid run configuration: {_format_errors(e)}") from e


def load_run_config(path: Optional[str]) -> Tuple[RunConfig, Dict[str, Any]]:
    """
    Load a run configuration file.

    Args:
        path: JSON file path, or None for all defaults

    Returns:
        The validated config and the raw document it came from
    """
    if path is None:
        return RunConfig(), {}
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file is not valid JSON: {path}: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"Config file must hold a JSON object: {path}")
    logger.info(f"Loaded run configuration from {path}")
    return parse_run_config(document), document


def parse_override(item: str) -> Tuple[str, Any]:
    """Split ``section.key=value``; the value is JSON if it parses, else a string."""
    if "=" not in item:
        raise ConfigError(f"Override must look like key=value, got '{item}'")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"Override has an empty key: '{item}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _lookup(document: Dict[str, Any], dotted: List[str]) -> Tuple[bool, Any]:
    node: Any = document
    for part in dotted:
        if not isinstance(node, dict) or part not in node:
            return False, None
        node = node[part]
    return True, node


def apply_overrides(
    config: RunConfig,
    overrides: Iterable[Tuple[str, Any]],
    file_document: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Apply dotted-key overrides on top of a config. Flags win over the file.

    Args:
        config: Base configuration
        overrides: (dotted key, value) pairs
        file_document: Raw file document, used to report flag/file conflicts

    Returns:
        A new, re-validated RunConfig
    """
    document = config.model_dump(mode="json")
    for key, value in overrides:
        parts = key.split(".")
        in_file, file_value = _lookup(file_document or {}, parts)
        if in_file and file_value != value:
            logger.warning(
                f"Flag value {key}={value!r} overrides config file value {file_value!r}"
            )
        node = document
        for part in parts[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                raise ConfigError(f"Unknown config section in override: '{key}'")
            node = child
        if parts[-1] not in node:
            raise ConfigError(f"Unknown config key in override: '{key}'")
        node[parts[-1]] = value
    return parse_run_config(document)


def dump_run_config(config: RunConfig) -> str:
    """Serialize the effective configuration as stable, sorted JSON."""
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True)


def describe_config_keys(model: Type[BaseModel] = RunConfig, prefix: str = "") -> List[Tuple[str, Any, str]]:
    """
    Flatten a config schema into (dotted key, default, description) rows.

    Nested sections are expanded; a missing description is an empty string.
    """
    rows: List[Tuple[str, Any, str]] = []
    defaults = model().model_dump(mode="json")
    for name, field in model.model_fields.items():
        key = f"{prefix}{name}"
        annotation = field.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            rows.extend(describe_config_keys(annotation, f"{key}."))
            continue
        rows.append((key, defaults.get(name), field.description or ""))
    return rows
