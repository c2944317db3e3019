"""Plain-text ``key = value`` configuration files.

    # comment
    steps = 2
    ratio = 0.25
    channels = 16,32

Blank lines and ``#`` comments are ignored; unknown or repeated keys are
errors. :func:`emit_config` writes every set field in declaration order, and
``parse -> emit -> parse`` is a fixpoint.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from pydantic import ValidationError

from .errors import ConfigError
from .schemas import TrainConfig
from .utils import text_hash

logger = logging.getLogger(__name__)

# ablation presets, overlaid on a loaded config
PRESETS: Dict[str, Dict[str, Any]] = {
    "idm": {"e2e": True, "invertible": True, "injectors": True, "init": "backproj"},
    "no-inj": {"e2e": True, "invertible": True, "injectors": False, "init": "backproj"},
    "noise-init": {"e2e": True, "invertible": True, "injectors": True, "init": "noise"},
    "no-inv": {"e2e": True, "invertible": False, "injectors": True, "init": "backproj"},
    "noise-regression": {"e2e": False, "invertible": False, "injectors": True, "init": "backproj"},
}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key", line=lineno)
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", line=lineno)
        values[key] = value
    return values


def build_config(values: Mapping[str, Any], source: str = "<config>") -> TrainConfig:
    try:
        return TrainConfig(**dict(values))
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"{source}: {problems}") from exc


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    return build_config(parse_config_text(text, source), source)


def load_config(path: Union[str, Path], preset: Optional[str] = None) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    config = parse_config(path.read_text(encoding="utf-8"), str(path))
    if preset is not None:
        config = apply_preset(config, preset)
    return config


def apply_preset(config: TrainConfig, name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    merged = config.model_dump()
    merged.update(PRESETS[name])
    logger.info("preset %s applied", name)
    return build_config(merged, f"preset {name}")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def emit_config(config: TrainConfig) -> str:
    lines = []
    for name in TrainConfig.model_fields:
        value = getattr(config, name)
        if value is None:
            continue
        lines.append(f"{name} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def save_config(path: Union[str, Path], config: TrainConfig) -> None:
    Path(path).write_text(emit_config(config), encoding="utf-8")


def config_hash(config: TrainConfig) -> int:
    return text_hash(emit_config(config))
