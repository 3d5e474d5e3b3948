"""``key = value`` text files mapped onto dataclasses."""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = value
    return values


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    return parse_kv(path.read_text(encoding="utf-8"), str(path))


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_kv(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in values.items())


def write_kv(path, values: Mapping[str, Any]) -> None:
    Path(path).write_text(format_kv(values), encoding="utf-8")


def coerce(text: str, like: Any, key: str = "value") -> Any:
    """Parse ``text`` into the type of the example value ``like``."""
    try:
        if isinstance(like, bool):
            lowered = text.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            elem = like[0] if like else 0
            return tuple(coerce(s, elem, key) for s in items)
        if like is None:
            return None if text.strip().lower() in ("", "none") else text
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None


def dataclass_from_kv(cls, values: Mapping[str, str], strict: bool = False):
    defaults = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in values.items():
        if key not in known:
            if strict:
                raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
            continue
        kwargs[key] = coerce(text, getattr(defaults, key), key)
    return cls(**kwargs)
