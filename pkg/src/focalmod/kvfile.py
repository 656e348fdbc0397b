"""Flat ``key=value`` config files: one key per line, ``#`` starts a comment."""
from __future__ import annotations

from pathlib import Path

from .exceptions import ConfigError, InputError


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_kv(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    return parse_kv(text, str(path))


def format_kv(kv: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in kv.items())
