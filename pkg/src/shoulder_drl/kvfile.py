"""Flat ``key = value`` text files.

One key per line, ``#`` starts a comment, blank lines are ignored. Values
stay strings here; callers convert.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping


class ConfigError(ValueError):
    pass


def parse(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load(path: str | Path) -> dict[str, str]:
    path = Path(path)
    return parse(path.read_text(), str(path))


def dump(values: Mapping[str, object]) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def floats(value: str) -> tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())
