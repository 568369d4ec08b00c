"""Plain ``key = value`` configuration files.

One pair per line, ``#`` starts a comment, blank lines are ignored.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Callable, Mapping

from .errors import ConfigError


def parse_kv_text(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def read_kv_file(path: str | os.PathLike) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_kv_text(text, source=str(path))


def write_kv_text(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def _fmt(v: Any) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def coerce_fields(
    values: Mapping[str, str],
    converters: Mapping[str, Callable[[str], Any]],
    *,
    section: str,
    allow_unknown: bool = False,
) -> dict[str, Any]:
    """Convert string values with per-key converters.

    Every bad key is collected and reported in a single ConfigError.
    """
    out: dict[str, Any] = {}
    problems: list[str] = []
    for key, raw in values.items():
        conv = converters.get(key)
        if conv is None:
            if not allow_unknown:
                problems.append(f"{key}: unknown key")
            continue
        try:
            out[key] = conv(raw)
        except (TypeError, ValueError) as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise ConfigError(f"invalid {section} configuration: " + "; ".join(problems))
    return out
