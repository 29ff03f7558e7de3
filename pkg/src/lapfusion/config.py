"""Run configuration: a TOML file plus command-line overrides."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .fusion import FitConfig
from .synthetic import RigSpec, WrinkleSpec

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    output: str = "out"
    rig: str = "out/rig.json"
    poses: str = "out/poses.txt"
    scans: str = "out/scans"
    checkpoint: str = "out/model.lfd"


@dataclass(frozen=True)
class SynthConfig:
    frames: int = 20
    points: int = 20000
    noise: float = 3e-4
    max_angle: float = 0.5
    camera: tuple[float, float, float] | None = None
    rig: RigSpec = field(default_factory=RigSpec)
    wrinkle: WrinkleSpec = field(default_factory=WrinkleSpec)


@dataclass(frozen=True)
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    fit: FitConfig = field(default_factory=FitConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    scale: float = 1.0
    threads: int = 1
    deterministic: bool = True

    @property
    def seed(self) -> int:
        return self.fit.seed

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if name in known else None
        if hasattr(default, "__dataclass_fields__") and isinstance(value, dict):
            value = _build(type(default), value, f"{where}.{name}" if where else name)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where or 'root'}] {exc}") from None


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``section.key=value`` with a TOML-literal value (bare words become strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def load_config(path=None, overrides: list[dict] | None = None) -> RunConfig:
    """Defaults, then the TOML file (if any), then each override in order."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    for o in overrides or []:
        data = _merge(data, o)
    cfg = _build(RunConfig, data, "")
    if cfg.threads < 1:
        raise ConfigError("threads must be at least 1")
    if cfg.synth.frames < 1 or cfg.synth.points < 1 or cfg.synth.noise < 0:
        raise ConfigError("synth.frames and synth.points must be positive and noise non-negative")
    return cfg
