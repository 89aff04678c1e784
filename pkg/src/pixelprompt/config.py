"""Declarative TOML configuration shared by every command.

Layers merge in order: built-in defaults, then the config file, then
``section.key=value`` overrides from the command line. Override values are
parsed as TOML literals when possible (``sweep.n_instances=20``,
``sweep.m_grid=[800,1000]``) and kept as plain strings otherwise.
"""

from __future__ import annotations

import copy
import os
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .harness import SweepConfig
from .modelgw import EndpointConfig, MockConfig, MockEndpoint, ModelEndpoint, OpenAIEndpoint
from .render import RenderSpec
from .tokenomics import ModelProfile, get_profile

DEFAULTS: dict[str, Any] = {
    "model": {"profile": "gpt-4.1-mini"},
    "profiles": {},
    "render": {},
    "endpoint": {},
    "mock": {},
    "sweep": {
        "image_sizes": ["600x800", "600x1000", "750x1000"],
        "m_grid": list(range(800, 3001, 200)),
        "n_instances": 100,
        "seeds": [0],
        "delta_pts": 3.0,
    },
    "summarization": {"corpus": "", "limit": 0, "image_size": ""},
}
SWEEP_KEYS = {"image_sizes", "m_grid", "n_instances", "seeds", "delta_pts", "parallelism", "timestamp"}


def _merge(base: dict[str, Any], layer: Mapping[str, Any]) -> dict[str, Any]:
    for key, value in layer.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
    return base


def parse_override(item: str) -> tuple[list[str], Any]:
    """Split ``a.b=value`` into its key path and a TOML-typed value."""
    key, sep, raw = item.partition("=")
    path = [part.strip() for part in key.split(".")]
    if not sep or not all(path):
        raise ConfigError(f"override must look like section.key=value, got {item!r}")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return path, value


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> dict[str, Any]:
    """Merge defaults, an optional TOML file and command-line overrides.

    Raises:
        ConfigError: unreadable or malformed file, unknown section, bad override.
    """
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
        _merge(config, data)
    for item in overrides:
        keys, value = parse_override(item)
        nested: Any = value
        for key in reversed(keys):
            nested = {key: nested}
        _merge(config, nested)
    unknown = set(config) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section in DEFAULTS:
        if not isinstance(config[section], dict):
            raise ConfigError(f"config section [{section}] must be a table")
    return config


def profile_from(config: Mapping[str, Any], name: str | None = None) -> ModelProfile:
    extra = {n: ModelProfile.from_dict(d, name=n) for n, d in config["profiles"].items()}
    return get_profile(name or config["model"]["profile"], extra)


def render_spec_from(config: Mapping[str, Any]) -> RenderSpec:
    return RenderSpec.from_dict(config["render"])


def mock_config_from(config: Mapping[str, Any]) -> MockConfig:
    return MockConfig.from_dict(config["mock"])


def sweep_config_from(config: Mapping[str, Any], profile: ModelProfile | None = None) -> SweepConfig:
    section = dict(config["sweep"])
    unknown = set(section) - SWEEP_KEYS
    if unknown:
        raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
    if not section.get("timestamp"):
        section.pop("timestamp", None)
    return SweepConfig(profile=profile or profile_from(config), render=render_spec_from(config), **section)


def endpoint_from(config: Mapping[str, Any], profile: ModelProfile, *, mock: bool) -> ModelEndpoint:
    """The mock model or an OpenAI-compatible client, per ``mock``.

    Raises:
        ConfigError: a real endpoint is requested without credentials.
    """
    if mock:
        return MockEndpoint(mock_config_from(config), profile)
    endpoint = EndpointConfig.from_dict(config["endpoint"])
    if not os.environ.get(endpoint.api_key_env):
        raise ConfigError(f"set ${endpoint.api_key_env} or pass --mock")
    return OpenAIEndpoint(endpoint)
