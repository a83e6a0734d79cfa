"""YAML configuration files with unit-suffixed keys.

Every physical quantity carries its unit in the key name, for example
``D_Tx_m2_per_s`` or ``T_b_s``.  Unknown keys are rejected so that a unit
typo cannot silently fall back to a default.  Errors report the offending
key path and, when available, its line in the file.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .channel import EnvParams
from .drug_delivery import CONSTRAINT_GRIDS, DrugDesignProblem
from .mc_link import McLinkConfig
from .particle_sim import MODES

__all__ = ["ConfigError", "Config", "load_config"]

ENV_KEYS = {
    "D_Tx_m2_per_s": "D_Tx",
    "D_Rx_m2_per_s": "D_Rx",
    "D_X_m2_per_s": "D_X",
    "a_tx_m": "a_tx",
    "a_rx_m": "a_rx",
    "r0_m": "r0",
}

ENV_DEFAULTS = {"D_Tx": 1e-14, "D_Rx": 0.0, "D_X": 8e-11, "a_tx": 1e-7, "a_rx": 1e-6, "r0": 1e-5}

SECTIONS = {
    "env": set(ENV_KEYS),
    "channel_stats": {"t_list_s", "tau_grid_s", "pdf_tau_s", "h_points"},
    "simulate": {"mode", "step_s", "realizations", "t_list_s", "tau_grid_s", "trajectory_horizon_s", "block_size"},
    "drug": {"T_s", "T_Rx_s", "I", "N", "beta", "theta_per_s", "constraint_grid"},
    "drug_eval": {"t_grid_s", "between_releases", "num", "grid_resolution", "monte_carlo_realizations"},
    "link": {"I", "T_b_s", "eta", "A", "psi", "P", "psi_list", "t_grid_s", "horizon_s"},
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the key and line."""


class _LineLoader(yaml.SafeLoader):
    """Safe loader that records the line of every mapping key."""


def _construct_mapping(loader: _LineLoader, node: yaml.MappingNode, deep: bool = False):
    mapping = {}
    lines = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in mapping:
            raise ConfigError(f"line {key_node.start_mark.line + 1}: duplicate key {key!r}")
        mapping[key] = loader.construct_object(value_node, deep=True)
        lines[key] = key_node.start_mark.line + 1
    mapping["__lines__"] = lines
    return mapping


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)
# YAML 1.1 only reads floats that contain a dot, so ``1e-11`` would be a
# string.  Accept the YAML 1.2 spelling as well.
_LineLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def _strip(obj):
    if isinstance(obj, dict):
        return {k: _strip(v) for k, v in obj.items() if k != "__lines__"}
    if isinstance(obj, list):
        return [_strip(v) for v in obj]
    return obj


@dataclass
class Config:
    """Parsed configuration with helpers that validate individual fields."""

    path: str
    data: dict
    lines: dict

    def _where(self, section: str, key: str | None = None) -> str:
        line = self.lines.get((section, key)) if key else self.lines.get((section, None))
        loc = f"{self.path}:{line}" if line else self.path
        return f"{loc}: {section}.{key}" if key else f"{loc}: {section}"

    def error(self, section: str, key: str | None, message: str) -> ConfigError:
        return ConfigError(f"{self._where(section, key)}: {message}")

    def section(self, name: str, required: bool = True) -> dict:
        sec = self.data.get(name)
        if sec is None:
            if required:
                raise ConfigError(f"{self.path}: missing section '{name}'")
            return {}
        return sec

    def get(self, section: str, key: str, default: Any = None, required: bool = False) -> Any:
        sec = self.section(section, required=required)
        if key not in sec:
            if required:
                raise self.error(section, key, "required key is missing")
            return default
        return sec[key]

    def number(self, section, key, default=None, required=False, minimum=None, positive=False, integer=False):
        value = self.get(section, key, default, required)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(section, key, f"expected a number, got {value!r}")
        if integer and (float(value) != int(value)):
            raise self.error(section, key, f"expected an integer, got {value!r}")
        value = int(value) if integer else float(value)
        if not np.isfinite(value):
            raise self.error(section, key, "must be finite")
        if positive and not value > 0:
            raise self.error(section, key, f"must be positive, got {value}")
        if minimum is not None and value < minimum:
            raise self.error(section, key, f"must be at least {minimum}, got {value}")
        return value

    def grid(self, section: str, key: str, required: bool = True, positive: bool = False, allow_empty: bool = False) -> np.ndarray:
        """A list of numbers or a ``{start, stop, num}`` linear grid."""
        value = self.get(section, key, None, required)
        if value is None:
            return None
        if isinstance(value, dict):
            missing = {"start", "stop", "num"} - set(value)
            extra = set(value) - {"start", "stop", "num"}
            if missing or extra:
                raise self.error(section, key, "grid needs exactly the keys start, stop, num")
            try:
                num = int(value["num"])
                arr = np.linspace(float(value["start"]), float(value["stop"]), num)
            except (TypeError, ValueError) as exc:
                raise self.error(section, key, f"invalid grid: {exc}") from None
            if num < 1:
                raise self.error(section, key, "num must be at least 1")
        elif isinstance(value, list):
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                raise self.error(section, key, "list entries must be numbers")
            arr = np.asarray(value, dtype=float)
        else:
            raise self.error(section, key, "expected a list or a {start, stop, num} mapping")
        if arr.size == 0 and not allow_empty:
            raise self.error(section, key, "must not be empty")
        if not np.all(np.isfinite(arr)):
            raise self.error(section, key, "entries must be finite")
        if positive and np.any(arr <= 0):
            raise self.error(section, key, "entries must be positive")
        if np.any(arr < 0):
            raise self.error(section, key, "entries must be non-negative")
        return arr

    # ------------------------------------------------------------ builders
    def env(self) -> EnvParams:
        sec = self.section("env", required=False)
        values = dict(ENV_DEFAULTS)
        for key, field_name in ENV_KEYS.items():
            if key in sec:
                values[field_name] = self.number("env", key)
        try:
            return EnvParams(**values)
        except ValueError as exc:
            raise self.error("env", None, str(exc)) from None

    def drug_problem(self, scale: str | None) -> DrugDesignProblem:
        self.section("drug")
        env = self.env()
        I_cfg = self.number("drug", "I", integer=True, minimum=1)
        if scale is not None:
            I = 3000 if scale == "paper" else 300
        else:
            I = I_cfg if I_cfg is not None else 300
        T = self.number("drug", "T_s", 86400.0, positive=True)
        theta = self.get("drug", "theta_per_s", 1.0)
        if isinstance(theta, list):
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in theta):
                raise self.error("drug", "theta_per_s", "entries must be numbers")
            theta = np.asarray(theta, dtype=float)
        elif isinstance(theta, bool) or not isinstance(theta, (int, float)):
            raise self.error("drug", "theta_per_s", "expected a number or a list of numbers")
        grid = self.get("drug", "constraint_grid", "per-release")
        if grid not in CONSTRAINT_GRIDS:
            raise self.error("drug", "constraint_grid", f"must be one of {CONSTRAINT_GRIDS}")
        try:
            return DrugDesignProblem(
                env=env,
                T=T,
                T_Rx=self.number("drug", "T_Rx_s", T, positive=True),
                I=I,
                N=self.number("drug", "N", 5, integer=True, minimum=1),
                beta=self.number("drug", "beta", 0.0, minimum=0.0),
                theta=theta,
                grid=grid,
            )
        except ValueError as exc:
            raise self.error("drug", None, str(exc)) from None

    def link(self) -> McLinkConfig:
        self.section("link")
        env = self.env()
        try:
            return McLinkConfig(
                env=env,
                I=self.number("link", "I", 30, integer=True, minimum=1),
                T_b=self.number("link", "T_b_s", 10.0, positive=True),
                eta=self.number("link", "eta", 1.0, minimum=0.0),
                A=self.number("link", "A", 10_000, integer=True, minimum=1),
                psi=self.number("link", "psi", 0.02, positive=True),
                P=self.number("link", "P", 0.8, positive=True),
            )
        except ValueError as exc:
            raise self.error("link", None, str(exc)) from None

    def sim_mode(self) -> str:
        mode = self.get("simulate", "mode", "gaussian-displacement")
        if mode not in MODES:
            raise self.error("simulate", "mode", f"must be one of {MODES}")
        return mode


def load_config(path: str | Path) -> Config:
    """Read and structurally validate a configuration file."""
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    try:
        raw = yaml.load(text, Loader=_LineLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{line}: invalid YAML: {exc.problem}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if raw is None:
        raw = {"__lines__": {}}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    lines: dict = {}
    top_lines = raw.get("__lines__", {})
    for name, sec in raw.items():
        if name == "__lines__":
            continue
        if name not in SECTIONS:
            raise ConfigError(f"{path}:{top_lines.get(name, '?')}: unknown section '{name}'")
        lines[(name, None)] = top_lines.get(name)
        if sec is None:
            continue
        if not isinstance(sec, dict):
            raise ConfigError(f"{path}:{top_lines.get(name, '?')}: section '{name}' must be a mapping")
        sec_lines = sec.get("__lines__", {})
        for key in sec:
            if key == "__lines__":
                continue
            lines[(name, key)] = sec_lines.get(key)
            if key not in SECTIONS[name]:
                allowed = ", ".join(sorted(SECTIONS[name]))
                raise ConfigError(f"{path}:{sec_lines.get(key, '?')}: unknown key '{name}.{key}' (allowed: {allowed})")
    data = {k: (v if v is not None else {}) for k, v in _strip(raw).items()}
    return Config(path, data, lines)
