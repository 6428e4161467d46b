"""TOML configuration: one file, one section per component, flag overrides on top."""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from .mapping import MapError, MapParams
from .optimize import OptParams
from .search import RobotParams

SCENE_KINDS = ("spiral", "uneven", "plane", "block", "two-level")


class ConfigError(ValueError):
    pass


@dataclass
class SceneParams:
    kind: str = "spiral"
    seed: int = 1
    res_pc: float = 0.2
    noise_sigma: float = 0.02
    # spiral ramp
    radius: float = 8.0
    width: float = 4.0
    turns: float = 2.0
    rise_per_turn: float = 3.0
    apron_length: float = 4.0
    # square scenes (uneven, plane, block, two-level)
    extent: float = 16.0
    amplitude: float = 0.6
    octaves: int = 3
    slope_deg: float = 0.0
    block_min: List[float] = field(default_factory=lambda: [7.0, 7.0])
    block_size: float = 2.0
    block_height: float = 1.0
    deck_min: List[float] = field(default_factory=lambda: [8.0, 4.0])
    deck_size: List[float] = field(default_factory=lambda: [6.0, 6.0])
    deck_z: float = 2.5
    ramp_slope_deg: float = 20.0

    def validate(self) -> "SceneParams":
        if self.kind not in SCENE_KINDS:
            raise ConfigError(f"scene.kind must be one of {SCENE_KINDS}, got {self.kind!r}")
        for name in ("res_pc", "radius", "width", "turns", "extent", "block_size", "block_height", "deck_z"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"scene.{name} must be positive")
        for name in ("noise_sigma", "amplitude", "apron_length"):
            if getattr(self, name) < 0:
                raise ConfigError(f"scene.{name} must be non-negative")
        for name in ("block_min", "deck_min", "deck_size"):
            if len(getattr(self, name)) != 2:
                raise ConfigError(f"scene.{name} must have two entries")
        return self


@dataclass
class BenchParams:
    n_pairs: int = 100
    seed: int = 7
    clearance: float = 0.3  # candidate endpoints keep this far from same-level obstacles
    min_separation: float = 1.0
    safety_radius: float = 0.0  # collision check radius; 0 checks traversability only
    threads: int = 1

    def validate(self) -> "BenchParams":
        if self.n_pairs < 0:
            raise ConfigError("bench.n_pairs must be non-negative")
        if self.clearance < 0 or self.safety_radius < 0 or self.min_separation < 0:
            raise ConfigError("bench distances must be non-negative")
        if self.threads < 1:
            raise ConfigError("bench.threads must be >= 1")
        return self


SECTIONS = {
    "map": MapParams,
    "robot": RobotParams,
    "opt": OptParams,
    "scene": SceneParams,
    "bench": BenchParams,
}


@dataclass
class Config:
    map: MapParams = field(default_factory=MapParams)
    robot: RobotParams = field(default_factory=RobotParams)
    opt: OptParams = field(default_factory=OptParams)
    scene: SceneParams = field(default_factory=SceneParams)
    bench: BenchParams = field(default_factory=BenchParams)

    def validate(self) -> "Config":
        """Check every section's invariants; all failures surface as ConfigError."""
        for name in SECTIONS:
            try:
                getattr(self, name).validate()
            except ConfigError:
                raise
            except (ValueError, MapError) as exc:
                raise ConfigError(f"[{name}] {exc}") from exc
        return self

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        # TOML has no null: unset optional values are left out and fall back to defaults
        return {name: {k: v for k, v in asdict(getattr(self, name)).items() if v is not None}
                for name in SECTIONS}


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float) or default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where} must be a list of numbers")
        return [float(v) for v in value]
    return value


def config_from_dict(doc: Dict[str, Any], base: Optional[Config] = None) -> Config:
    cfg = base if base is not None else Config()
    for section, values in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        target = getattr(cfg, section)
        names = {f.name for f in fields(target)}
        defaults = asdict(SECTIONS[section]())
        for key, value in values.items():
            if key not in names:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(target, key, _coerce(section, key, value, defaults[key]))
    return cfg


def load_config(path) -> Config:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)


def parse_override(text: str):
    """Split ``section.key=value``; the value is read as a TOML value, else kept as a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    lhs, rhs = text.split("=", 1)
    parts = lhs.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key {lhs!r} must look like section.key")
    try:
        value = tomllib.loads(f"v = {rhs.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()
    return parts[0], parts[1], value


def apply_overrides(cfg: Config, overrides: Sequence[str]) -> Config:
    for text in overrides:
        section, key, value = parse_override(text)
        config_from_dict({section: {key: value}}, cfg)
    return cfg


def resolve_config(path=None, overrides: Sequence[str] = ()) -> Config:
    """Defaults, then the config file, then ``--set`` overrides; validated."""
    cfg = load_config(path) if path is not None else Config()
    return apply_overrides(cfg, overrides).validate()


def dump_config(cfg: Config) -> str:
    return tomli_w.dumps(cfg.to_dict())


def write_config(cfg: Config, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
