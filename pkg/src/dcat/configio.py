"""key=value config text <-> dataclass fields.

One option per line, ``key = value`` with optional whitespace; blank lines
and ``#`` comments are skipped. Values coerce by the dataclass field type
(int, float, bool, str); booleans are written and read as ``true``/``false``.
Unknown keys are the caller's job to reject (a file may feed several
dataclasses), so `apply_kv` records which keys it consumed.
"""

from __future__ import annotations

import dataclasses

__all__ = ["ConfigError", "parse_kv_text", "apply_kv", "render_kv"]


class ConfigError(ValueError):
    """Raised for unparseable config text or invalid option values."""


def parse_kv_text(text: str) -> dict:
    """Parse config text into an ordered {key: raw string value} mapping."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, raw: str, typ):
    try:
        if typ is bool:
            if raw == "true":
                return True
            if raw == "false":
                return False
            raise ValueError("expected true or false")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
    except ValueError as exc:
        raise ConfigError(f"option {key!r}: cannot parse {raw!r} as {typ.__name__}") from exc
    raise ConfigError(f"option {key!r} has unsupported type {typ}")


def apply_kv(cls, mapping: dict, consumed: set):
    """Build `cls` from defaults overridden by matching keys in `mapping`.

    Adds every key it used to `consumed` so the caller can detect strays.
    """
    kwargs = {}
    for field in dataclasses.fields(cls):
        if field.name in mapping:
            kwargs[field.name] = _coerce(field.name, mapping[field.name], _field_type(cls, field))
            consumed.add(field.name)
    return cls(**kwargs)


def _field_type(cls, field):
    # Field annotations may be strings under `from __future__ import
    # annotations`; resolve the handful of builtin types we use.
    typ = field.type
    if isinstance(typ, str):
        typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, str)
    return typ


def render_kv(obj) -> str:
    """Serialize a dataclass as one key=value line per field."""
    lines = []
    for field in dataclasses.fields(obj):
        value = getattr(obj, field.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{field.name}={text}")
    return "\n".join(lines) + "\n"
