"""Flat key = value config files mapped onto :class:`TrainConfig`.

One assignment per line, ``#`` comments, unknown keys rejected so typos
surface immediately.  Tuple-valued fields take comma-separated entries.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .training import TrainConfig, full_scale_train_config


class ConfigError(ValueError):
    pass


_BOOL_WORDS = {"true": True, "false": False, "yes": True, "no": False,
               "1": True, "0": False}


def _coerce(name: str, raw: str, target_type, path: Path):
    try:
        if target_type is bool:
            word = raw.strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL_WORDS[word]
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is str:
            return raw.strip()
        # tuple[int, ...] fields
        return tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"{path}: bad value for {name}: {exc}") from exc


def parse_config_text(text: str, path: Path | str = "<config>") -> TrainConfig:
    path = Path(path)
    field_index = {f.name: f for f in dataclasses.fields(TrainConfig)}
    base = TrainConfig()
    overrides: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"{path}:{lineno}: expected 'key = value', got {stripped!r}"
            )
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key == "profile":
            if raw not in ("desk", "full"):
                raise ConfigError(
                    f"{path}:{lineno}: unknown profile {raw!r} "
                    "(expected desk or full)"
                )
            base = full_scale_train_config() if raw == "full" else TrainConfig()
            continue
        if key not in field_index:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        fld = field_index[key]
        target = fld.type
        if isinstance(target, str):
            target = {"int": int, "float": float, "str": str,
                      "bool": bool}.get(target, tuple)
        overrides[key] = _coerce(key, raw, target, path)
    try:
        return dataclasses.replace(base, **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid configuration: {exc}") from exc


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), path)


def write_config(config: TrainConfig, path: str | Path) -> None:
    lines = []
    for fld in dataclasses.fields(TrainConfig):
        value = getattr(config, fld.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{fld.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")
