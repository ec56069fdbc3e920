"""Small helpers for schema-checked config sections."""
from __future__ import annotations

from typing import Any

from .errors import ConfigError


def take_section(section: dict[str, Any], name: str,
                 schema: dict[str, tuple[type, Any]],
                 subsections: set[str] = frozenset()) -> dict[str, Any]:
    """Validate one config table against ``schema`` (key -> (type, default)).

    Unknown keys are rejected with their dotted path; ints are accepted where
    floats are expected; bools never pass as ints.
    """
    if not isinstance(section, dict):
        raise ConfigError(f"{name} must be a table")
    unknown = set(section) - set(schema) - set(subsections)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{name}]")
    out: dict[str, Any] = {}
    for key, (typ, default) in schema.items():
        if key not in section:
            out[key] = default
            continue
        value = section[key]
        if isinstance(value, bool) and typ is not bool:
            raise ConfigError(f"{name}.{key}: expected {typ.__name__}, got bool")
        if typ is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, typ):
            raise ConfigError(
                f"{name}.{key}: expected {typ.__name__}, got {type(value).__name__}")
        out[key] = value
    return out
