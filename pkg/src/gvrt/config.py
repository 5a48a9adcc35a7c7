"""Flat JSON configs with type-checked ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from pathlib import Path

from gvrt.errors import ConfigError

SEED_ENV = "GVRT_SEED"


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _coerce(key, raw, typ):
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin is typing.Union:  # Optional[X]
        if raw is None or (isinstance(raw, str) and raw.lower() in ("none", "null")):
            return None
        return _coerce(key, raw, next(a for a in args if a is not type(None)))
    try:
        if typ is bool:
            if isinstance(raw, bool):
                return raw
            if isinstance(raw, str) and raw.lower() in ("true", "1", "yes"):
                return True
            if isinstance(raw, str) and raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
                raise ValueError(raw)
            return int(raw)
        if typ is float:
            if isinstance(raw, bool):
                raise ValueError(raw)
            return float(raw)
        if typ is str:
            if not isinstance(raw, str):
                raise ValueError(raw)
            return raw
        if origin in (list, typing.List):
            if isinstance(raw, str):
                raw = json.loads(raw) if raw.strip().startswith("[") else [x for x in raw.split(",") if x]
            return [_coerce(key, x if not isinstance(x, (int, float)) else str(x), args[0]) for x in raw]
    except (ValueError, TypeError, json.JSONDecodeError):
        raise ConfigError(f"invalid value {raw!r} for key {key!r} (expected {getattr(typ, '__name__', typ)})")
    return raw


def build_config(cls, values: dict, overrides=(), section: str = None):
    """Instantiate dataclass ``cls`` from ``values`` plus ``key=value`` overrides.

    Unknown keys raise :class:`ConfigError` naming the key and listing valid ones. A
    dotted key is accepted when its prefix names ``section`` (``train.steps``).
    """
    types = _field_types(cls)
    merged = {}

    def put(key, raw):
        if section and key.startswith(section + "."):
            key = key[len(section) + 1 :]
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(types))}")
        merged[key] = _coerce(key, raw, types[key])

    for k, v in (values or {}).items():
        put(k, v)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        k, v = item.split("=", 1)
        put(k.strip(), v.strip())
    if "seed" in types and os.environ.get(SEED_ENV):
        put("seed", os.environ[SEED_ENV])
    cfg = cls(**merged)
    if hasattr(cfg, "validate"):
        cfg.validate()
    return cfg


def load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return obj


def write_resolved(cfg, out_dir, name="config.resolved.json"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(dataclasses.asdict(cfg), indent=2))
    return out_dir / name
