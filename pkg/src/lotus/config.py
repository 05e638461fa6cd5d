"""Broker configuration: defaults, LOTUS_* environment variables, TOML file.

Precedence (lowest to highest): built-in defaults, environment, config file.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass
from typing import Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .broker import DEFAULT_MAX_PAYLOAD
from .errors import InvalidConfig
from .protocol import DEFAULT_MGMT_PORT, DEFAULT_PORT

_ENV_KEYS = {
    "LOTUS_PORT": ("port", int),
    "LOTUS_MGMT_PORT": ("mgmt_port", int),
    "LOTUS_MAX_PAYLOAD": ("max_payload", int),
    "LOTUS_LOG": ("log_level", str),
}

_FILE_KEYS = {"port": int, "mgmt_port": int, "max_payload": int, "log_level": str, "host": str}


@dataclass(frozen=True)
class BrokerConfig:
    host: str = "0.0.0.0"
    port: int = DEFAULT_PORT
    mgmt_port: int = DEFAULT_MGMT_PORT
    max_payload: int = DEFAULT_MAX_PAYLOAD
    log_level: str = "INFO"


def load_config(env: Mapping[str, str] | None = None, config_path: str | None = None) -> BrokerConfig:
    env = os.environ if env is None else env
    values: dict[str, object] = {}
    for env_key, (field, cast) in _ENV_KEYS.items():
        if env_key in env:
            try:
                values[field] = cast(env[env_key])
            except ValueError as e:
                raise InvalidConfig(f"{env_key}: {e}") from e
    if config_path is not None:
        try:
            with open(config_path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as e:
            raise InvalidConfig(f"cannot read config file {config_path}: {e}") from e
        except tomllib.TOMLDecodeError as e:
            raise InvalidConfig(f"{config_path}: {e}") from e
        for key, value in data.items():
            if key not in _FILE_KEYS:
                raise InvalidConfig(f"{config_path}: unknown key {key!r}")
            if not isinstance(value, _FILE_KEYS[key]) or isinstance(value, bool):
                raise InvalidConfig(f"{config_path}: {key} must be {_FILE_KEYS[key].__name__}")
            values[key] = value
    cfg = BrokerConfig(**values)  # type: ignore[arg-type]
    if cfg.port < 0 or cfg.mgmt_port < 0 or cfg.max_payload <= 0:
        raise InvalidConfig("ports must be >= 0 and max_payload > 0")
    return cfg
