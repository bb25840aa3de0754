"""Structured-text configuration for the trap array and gas.

Files are YAML mappings. Unknown keys and ill-typed values are reported
with the line and column where they appear.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .errors import ConfigError, DomainError
from .gas import GasEnvironment
from .optics import DEFAULT_WAIST_ANISOTROPY, Polarization, TrapArray

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Config:
    wavelength_nm: float = 1064.0
    na: float = 0.95
    rows: int = 3
    cols: int = 3
    pitch_x_um: float = 1.77
    pitch_y_um: float = 2.66
    power_mw: float = 200.0
    polarization: str = "linear_x"
    waist_anisotropy: float = DEFAULT_WAIST_ANISOTROPY
    axial_force_n: float = 0.0
    pressure_pa: float = 2000.0
    temperature_k: float = 296.0
    accommodation: float = 0.9
    radius_nm: float = 85.0

    def __post_init__(self):
        try:
            Polarization(self.polarization)
        except ValueError:
            raise ConfigError(f"polarization must be one of {[p.value for p in Polarization]}, "
                              f"got {self.polarization!r}") from None

    def trap_array(self) -> TrapArray:
        try:
            return TrapArray.grid(self.rows, self.cols, self.pitch_x_um * 1e-6, self.pitch_y_um * 1e-6,
                                  self.power_mw * 1e-3, self.wavelength_nm * 1e-9, self.na,
                                  self.polarization, self.waist_anisotropy, self.axial_force_n)
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc

    def gas(self) -> GasEnvironment:
        try:
            return GasEnvironment(self.pressure_pa, self.temperature_k, accommodation=self.accommodation)
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_TYPES = {f.name: f.type for f in fields(Config)}


def _where(node, source: str) -> str:
    mark = node.start_mark
    return f"{source}:{mark.line + 1}:{mark.column + 1}"


def _coerce(key: str, value, where: str):
    kind = _TYPES[key]
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: {key} must be an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: {key} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: {key} must be a string, got {value!r}")
    return value


def parse_mapping(text: str, source: str = "<string>"):
    """Parse YAML text into (python mapping, node map for positions)."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError(f"{where}: {exc.problem}") from None
    if data is None:
        return {}, {}
    if not isinstance(data, dict) or not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{source}:1:1: top level must be a mapping")
    positions = {k.value: (k, v) for k, v in node.value}
    return data, positions


def config_from_mapping(data: dict, positions: dict | None = None, source: str = "<config>",
                        base: Config | None = None) -> Config:
    positions = positions or {}
    values = {}
    for key, value in data.items():
        key_node = positions.get(key, (None, None))[0]
        where = _where(key_node, source) if key_node is not None else source
        if key not in _TYPES:
            raise ConfigError(f"{where}: unknown key {key!r}; known keys: {', '.join(sorted(_TYPES))}")
        value_node = positions.get(key, (None, None))[1]
        values[key] = _coerce(key, value, _where(value_node, source) if value_node is not None else where)
    try:
        return dataclasses.replace(base or Config(), **values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str | Path | None, base: Config | None = None) -> Config:
    """Read a configuration file; ``None`` gives the defaults."""
    if path is None:
        return base or Config()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    data, positions = parse_mapping(text, str(path))
    data.pop("schema_version", None)
    return config_from_mapping(data, positions, str(path), base)
