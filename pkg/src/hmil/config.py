"""Flat ``key = value`` configuration files."""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any, Callable, Mapping, Optional


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class Config(dict):
    """A ``dict`` of raw string values with typed, key-naming accessors."""

    def _get(self, key: str, cast: Callable, default: Any):
        if key not in self:
            if default is _REQUIRED:
                raise ConfigError(f"missing required config key {key!r}", key)
            return default
        raw = self[key]
        try:
            return cast(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r}", key) from None

    def str(self, key, default=None):
        return self._get(key, str, _REQUIRED if default is None else default)

    def int(self, key, default=None):
        return self._get(key, int, _REQUIRED if default is None else default)

    def float(self, key, default=None):
        return self._get(key, float, _REQUIRED if default is None else default)

    def bool(self, key, default=None):
        return self._get(key, _parse_bool, _REQUIRED if default is None else default)

    def dumps(self) -> str:
        return "".join(f"{k} = {self[k]}\n" for k in sorted(self))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


_REQUIRED = object()


def _parse_bool(raw: str) -> bool:
    low = str(raw).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def parse_config(text: str) -> Config:
    cfg = Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        cfg[key] = value
    return cfg


def load_config(path) -> Config:
    return parse_config(Path(path).read_text())


def write_config(path, values: Mapping[str, Any]) -> None:
    Path(path).write_text("".join(f"{k} = {values[k]}\n" for k in values))
