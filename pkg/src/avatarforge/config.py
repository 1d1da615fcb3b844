"""Flat key-value configuration with section headers (INI syntax).

Values stay strings until a stage asks for them with a type; unknown keys are
ignored so one file can configure every stage. See docs/config.example.ini.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from .errors import InvalidInputError


class Config:
    def __init__(self, values: dict[str, str] | None = None):
        self._values = dict(values or {})

    @classmethod
    def load(cls, path) -> "Config":
        parser = configparser.ConfigParser()
        text = Path(path).read_text()
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise InvalidInputError(f"bad config file {path}: {e}") from e
        values = {}
        for section in parser.sections():
            for key, val in parser.items(section):
                values[f"{section}.{key}"] = val
        return cls(values)

    def get(self, key: str, default=None, cast=str):
        if key not in self._values:
            return default
        raw = self._values[key]
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)

    def get_int(self, key: str, default: int | None = None):
        return self.get(key, default, int)

    def get_float(self, key: str, default: float | None = None):
        return self.get(key, default, float)

    def get_bool(self, key: str, default: bool | None = None):
        return self.get(key, default, bool)
