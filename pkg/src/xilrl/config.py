"""Plain-text ``key = value`` configuration files.

Lines starting with ``#`` are comments. Keys are dotted names such as
``f_nox`` or ``range.engine_speed.min``. Values are returned as strings;
typed loaders live next to the dataclasses that consume them.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    """Malformed configuration file or value."""


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_config(path: str | Path) -> dict[str, str]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def _coerce(raw: str, kind: Any) -> Any:
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def apply_overrides(obj: Any, values: Mapping[str, str], prefix: str = "") -> Any:
    """Return a copy of dataclass ``obj`` with matching keys replaced.

    Only scalar fields are overridable; ``prefix`` selects a namespace
    (e.g. ``"ppo."``). Unknown keys in the namespace are ignored so that one
    file can hold several sections.
    """
    changes = {}
    for f in dataclasses.fields(obj):
        key = prefix + f.name
        if key not in values:
            continue
        current = getattr(obj, f.name)
        kind = type(current) if current is not None else str
        try:
            changes[f.name] = _coerce(values[key], kind)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    return dataclasses.replace(obj, **changes)
