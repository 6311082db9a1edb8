"""
Early-Exit Engine - Configuration Validators

Parsing and validation of run settings: key=value config files, value
coercion, and conversion of pydantic failures into ConfigurationError.
"""

import os
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from config.run_config import RunConfig
from models.errors import ArtifactIOError, ConfigurationError

# Fields given as comma-separated lists
LIST_FIELDS = {"thetas", "placements", "policies"}


def parse_config_text(text: str) -> Dict[str, str]:
    """
    Parse `key = value` lines; blank lines and '#' comments are ignored.

    Raises:
        ConfigurationError: a line has no '=' or an empty key
    """
    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {number}: expected key = value, got '{line}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {number}: missing key")
        values[key.replace("-", "_")] = value
    return values


def coerce_value(field: str, raw: Any) -> Any:
    """Split list fields on commas; pydantic handles the scalar conversions."""
    if field in LIST_FIELDS and isinstance(raw, str):
        return [item.strip() for item in raw.split(",") if item.strip()]
    return raw


def load_config_file(path: str) -> Dict[str, str]:
    if not os.path.exists(path):
        raise ArtifactIOError(f"config file not found: {path}")
    with open(path, "r") as f:
        return parse_config_text(f.read())


def as_configuration_error(error: ValidationError) -> ConfigurationError:
    """One ConfigurationError listing every field a pydantic model rejected."""
    problems: List[str] = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "config"
        problems.append(f"{location}: {item['msg']}")
    return ConfigurationError("; ".join(problems))


def validate_run_config(data: Dict[str, Any]) -> RunConfig:
    """
    Build a RunConfig, rejecting unknown keys.

    Raises:
        ConfigurationError: listing every offending field
    """
    unknown = sorted(set(data) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigurationError(f"unknown settings: {', '.join(unknown)}")
    cleaned = {field: coerce_value(field, value) for field, value in data.items()}
    try:
        return RunConfig(**cleaned)
    except ValidationError as e:
        raise as_configuration_error(e)


def build_run_config(path: Optional[str] = None,
                     overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides."""
    data: Dict[str, Any] = load_config_file(path) if path else {}
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return validate_run_config(data)


def get_field_help_text(field: str) -> str:
    """
    Get help text for a run setting.

    Args:
        field: Setting name

    Returns:
        Help text string
    """
    info = RunConfig.model_fields.get(field)
    return (info.description or "") if info else ""
