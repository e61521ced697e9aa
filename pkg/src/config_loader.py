"""
Flat `key = value` experiment files, presets and sweep definitions.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from src.errors import ConfigError
from src.models import ExperimentConfig, SweepSpec, _split_list
from src.presets import PresetLoader

logger = logging.getLogger(__name__)

PRESET_KEY = "preset"
SWEEP_AXIS_KEY = "sweep_axis"
SWEEP_VALUES_KEY = "sweep_values"

# alias -> canonical field name
KEY_ALIASES = {"K": "edges", "N": "clients", "C": "fraction", "E": "local_epochs", "M": "passes", "T": "rounds"}


def parse_flat(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment"""
    values: Dict[str, str] = {}
    problems: List[str] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {number}: expected 'key = value', got '{raw.strip()}'")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            problems.append(f"line {number}: missing key")
            continue
        key = KEY_ALIASES.get(key, key)
        if key in values:
            problems.append(f"line {number}: duplicate key '{key}'")
            continue
        values[key] = value
    if problems:
        raise ConfigError(f"Malformed config {source}", problems)
    return values


def _validation_messages(error: ValidationError) -> List[str]:
    messages = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "config"
        messages.append(f"{location}: {item['msg']}")
    return messages


def validate_config(values: Dict[str, Any], source: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {source}", _validation_messages(e)) from e


def resolve_preset(name: str, loader: PresetLoader) -> Dict[str, Any]:
    preset = loader.get_preset(name)
    if preset is None:
        suggestions = [p.name for p in loader.search_presets(name)] or loader.names()
        raise ConfigError(f"Unknown preset '{name}'", [f"did you mean: {', '.join(suggestions)}"])
    return {KEY_ALIASES.get(k, k): v for k, v in preset.values.items()}


def merge_layers(file_values: Dict[str, Any], loader: Optional[PresetLoader],
                 overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """preset < file < overrides"""
    values = dict(file_values)
    merged: Dict[str, Any] = {}
    preset_name = values.pop(PRESET_KEY, None)
    if preset_name is not None:
        if loader is None:
            raise ConfigError(f"Config names preset '{preset_name}' but no presets are loaded")
        merged.update(resolve_preset(preset_name, loader))
    merged.update(values)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return merged


def load_experiment_config(path, loader: Optional[PresetLoader] = None,
                           overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Read a config file, apply its preset and the CLI overrides, validate"""
    path = Path(path)
    values = parse_flat(path.read_text(), str(path))
    if SWEEP_AXIS_KEY in values or SWEEP_VALUES_KEY in values:
        raise ConfigError(f"{path} is a sweep file; use the sweep command")
    config = validate_config(merge_layers(values, loader, overrides), str(path))
    logger.debug(f"Loaded config {config.name} from {path}")
    return config


def load_sweep_spec(path, loader: Optional[PresetLoader] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> SweepSpec:
    """A config file plus sweep_axis / sweep_values; every cell is validated up front"""
    path = Path(path)
    values = parse_flat(path.read_text(), str(path))
    axis = values.pop(SWEEP_AXIS_KEY, None)
    raw_values = values.pop(SWEEP_VALUES_KEY, None)
    if axis is None or raw_values is None:
        raise ConfigError(f"Sweep file {path} needs both {SWEEP_AXIS_KEY} and {SWEEP_VALUES_KEY}")
    axis = KEY_ALIASES.get(axis, axis)
    if axis not in ExperimentConfig.model_fields or axis in ("seeds", "name"):
        raise ConfigError(f"Sweep axis '{axis}' is not a sweepable config key")

    merged = merge_layers(values, loader, overrides)
    base = validate_config(merged, str(path))
    sweep_values = _split_list(raw_values)
    if not sweep_values:
        raise ConfigError(f"Sweep file {path} lists no {SWEEP_VALUES_KEY}")
    problems = []
    for value in sweep_values:
        try:
            ExperimentConfig.model_validate({**merged, axis: value})
        except ValidationError as e:
            problems.extend(f"{axis}={value}: {m}" for m in _validation_messages(e))
    if problems:
        raise ConfigError(f"Invalid sweep values in {path}", problems)
    return SweepSpec(base=base, axis=axis, values=sweep_values)


def cell_config(spec: SweepSpec, value: Any) -> ExperimentConfig:
    """The base config with the sweep axis set to one value"""
    document = spec.base.model_dump()
    document[spec.axis] = value
    document["name"] = f"{spec.base.name}/{spec.axis}={value}"
    return validate_config(document, f"{spec.axis}={value}")


def config_diff(a: Dict[str, Any], b: Dict[str, Any], ignore=()) -> List[str]:
    """Human-readable differences between two dumped configs"""
    return [
        f"{key}: {a.get(key)!r} != {b.get(key)!r}"
        for key in sorted(set(a) | set(b))
        if key not in ignore and a.get(key) != b.get(key)
    ]
