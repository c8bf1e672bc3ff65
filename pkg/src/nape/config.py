"""key=value configuration files and dataclass overrides."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Lines of ``key=value``; blank lines and #-comments ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def coerce(value: str, like: Any) -> Any:
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {value!r}")
    if isinstance(like, int) and not isinstance(like, bool):
        return int(float(value))
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        parts = [p for p in value.replace(",", " ").split() if p]
        return tuple(coerce(p, like[0]) for p in parts)
    return value


def apply_overrides(instance, overrides: dict[str, str], *, consume: set[str] | None = None):
    """Replace matching dataclass fields with coerced override values.

    Returns a new instance; records consumed keys in ``consume`` when given.
    """
    if not dataclasses.is_dataclass(instance):
        raise ConfigError(f"{instance!r} is not a dataclass")
    changes = {}
    for f in dataclasses.fields(instance):
        if f.name in overrides:
            current = getattr(instance, f.name)
            if dataclasses.is_dataclass(current):
                continue
            changes[f.name] = coerce(overrides[f.name], current)
            if consume is not None:
                consume.add(f.name)
    return dataclasses.replace(instance, **changes) if changes else instance
