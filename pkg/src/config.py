"""Run configuration files: flat `section.key = value` lines validated against `RunConfig`.

    # comments and blank lines are ignored
    seed = 42
    data.annotator_accuracies = 0.8, 0.9, 0.7
    pretrain.opt.epochs = 30
    lecomh.lambda = 0.5

Unset keys keep their schema defaults. Lists are comma-separated; an empty value is an empty list (or None for
optional scalars).
"""
import hashlib
import os
import typing
from pathlib import Path
from typing import Any, Dict, List, Tuple, Type, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from .errors import ConfigError
from .models.schemas import RunConfig

load_dotenv()

LOG_LEVEL = os.getenv("LECOMH_LOG_LEVEL", "INFO")


def _field(model: Type[BaseModel], name: str, dotted: str) -> Tuple[str, Any]:
    for field_name, info in model.model_fields.items():
        if name in (field_name, info.alias):
            return info.alias or field_name, info.annotation
    raise ConfigError("unknown key", key=dotted)


def _is_model(annotation: Any) -> bool:
    return isinstance(annotation, type) and issubclass(annotation, BaseModel)


def _is_list(annotation: Any) -> bool:
    if typing.get_origin(annotation) in (list, List):
        return True
    return any(_is_list(arg) for arg in typing.get_args(annotation) if typing.get_origin(annotation) is Union)


def _parse_value(raw: str, annotation: Any) -> Any:
    if _is_list(annotation):
        return [item.strip() for item in raw.split(",")] if raw else []
    return raw if raw else None


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values: Dict[str, Any] = RunConfig().model_dump(by_alias=True)
    seen = set()
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        if key in seen:
            raise ConfigError(f"{source}:{line_no}: duplicate key", key=key)
        seen.add(key)

        model: Type[BaseModel] = RunConfig
        target = values
        parts = key.split(".")
        for part in parts[:-1]:
            name, annotation = _field(model, part, key)
            if not _is_model(annotation):
                raise ConfigError("not a configuration section", key=key)
            model, target = annotation, target[name]
        name, annotation = _field(model, parts[-1], key)
        if _is_model(annotation):
            raise ConfigError("is a section, not a value", key=key)
        target[name] = _parse_value(raw.strip(), annotation)
    return validate_config(values)


def validate_config(values: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(values)
    except ValidationError as exc:
        error = exc.errors()[0]
        key = ".".join(str(part) for part in error["loc"])
        raise ConfigError(error["msg"], key=key or None) from exc


def load_config(path: Union[str, Path]) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(_format_value(v) for v in value)
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def _flatten(values: Dict[str, Any], prefix: str = "") -> List[str]:
    lines = []
    for key, value in values.items():
        if isinstance(value, dict):
            lines.extend(_flatten(value, f"{prefix}{key}."))
        else:
            lines.append(f"{prefix}{key} = {_format_value(value)}".rstrip())
    return lines


def serialize_config(config: RunConfig) -> str:
    return "\n".join(_flatten(config.model_dump(by_alias=True))) + "\n"


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical serialization; the output root does not take part."""
    lines = [line for line in serialize_config(config).splitlines(keepends=True) if not line.startswith("output_dir ")]
    return hashlib.sha256("".join(lines).encode("utf-8")).hexdigest()
