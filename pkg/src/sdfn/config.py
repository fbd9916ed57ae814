"""Training configuration, named presets and config-file parsing."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .exceptions import ConfigError

MODULES = ("cam", "jrm", "gtm", "rcm")
ROUTERS = ("msr", "sr", "none")
TEACHERS = ("bank", "model_copy")

# Widths of the full-scale ResNet/LSTM setup; recorded for reference only.
FULL_SCALE_DIM = 1024
FULL_SCALE_RAW_DIM = 2048

# config-file key -> dataclass field, for keys that are not valid identifiers
KEY_ALIASES = {"lambda": "lam"}


@dataclass(frozen=True)
class TrainConfig:
    # optimisation
    epochs: int = 30
    batch_size: int = 16
    lr: float = 2e-3
    weight_decay: float = 1e-6
    lr_decay_epoch: int = 25
    lr_decay_factor: float = 0.1
    seed: int = 42
    # objective
    lam: float = 0.6
    tau_path: float = 2.0
    bbc_scale: float = 30.0
    use_bbc: bool = True
    use_cons: bool = True
    use_spd: bool = True
    cons_normalize: bool = True
    cons_detach_target: bool = True
    teacher: str = "bank"
    # architecture
    dim: int = 32
    heads: int = 4
    n_layers: int = 3
    tau_r: float = 1.0
    router: str = "msr"
    disabled_modules: tuple = ()
    ffn_hidden: int = 0  # 0 -> 4 * dim
    raw_dim: int = 0  # 0 -> 2 * dim
    # synthetic data
    n_attrs: int = 4
    n_values: int = 6
    grid: int = 4
    c_in: int = 8
    noise: float = 0.05
    max_edits: int = 2
    n_train: int = 2048
    n_eval: int = 500
    gallery_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "disabled_modules", tuple(sorted(set(self.disabled_modules), key=MODULES.index)))
        validate(self)

    @property
    def active_modules(self) -> tuple:
        return tuple(m for m in MODULES if m not in self.disabled_modules)

    @property
    def ffn_width(self) -> int:
        return self.ffn_hidden or 4 * self.dim

    @property
    def raw_width(self) -> int:
        return self.raw_dim or 2 * self.dim

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index."""
        return self.lr * self.lr_decay_factor if epoch >= self.lr_decay_epoch else self.lr

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["disabled_modules"] = list(self.disabled_modules)
        out["lambda"] = out.pop("lam")
        return out


def validate(cfg: TrainConfig) -> None:
    positive_ints = ("epochs", "batch_size", "lr_decay_epoch", "dim", "heads", "n_layers", "n_attrs",
                     "n_values", "grid", "c_in", "max_edits", "n_train", "n_eval", "gallery_size")
    for name in positive_ints:
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)}")
    for name in ("lr", "tau_path", "tau_r", "bbc_scale", "lr_decay_factor"):
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)}")
    for name in ("weight_decay", "lam", "noise", "ffn_hidden", "raw_dim"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be non-negative, got {getattr(cfg, name)}")
    unknown = [m for m in cfg.disabled_modules if m not in MODULES]
    if unknown:
        raise ConfigError(f"unknown module(s) in disabled_modules: {unknown}")
    if len(cfg.disabled_modules) >= len(MODULES):
        raise ConfigError("disabled_modules must leave at least one module active")
    if cfg.router not in ROUTERS:
        raise ConfigError(f"router must be one of {ROUTERS}, got {cfg.router!r}")
    if cfg.teacher not in TEACHERS:
        raise ConfigError(f"teacher must be one of {TEACHERS}, got {cfg.teacher!r}")
    if cfg.dim % cfg.heads:
        raise ConfigError(f"heads={cfg.heads} does not divide dim={cfg.dim}")
    if cfg.dim < 2:
        raise ConfigError("dim must be at least 2 (routers use dim // 2 hidden units)")
    if cfg.n_attrs < 2 or cfg.n_values < 2:
        raise ConfigError("n_attrs and n_values must both be >= 2")
    if cfg.max_edits > cfg.n_attrs:
        raise ConfigError(f"max_edits={cfg.max_edits} exceeds n_attrs={cfg.n_attrs}")
    if cfg.gallery_size > cfg.n_values ** cfg.n_attrs:
        raise ConfigError("gallery_size exceeds the number of distinct items")


PRESETS: dict = {
    "toy": {},
    # Adam 1e-4, weight decay 1e-6 and the per-dataset schedules of the original setup.
    "fashioniq": dict(epochs=60, batch_size=32, lr=1e-4, weight_decay=1e-6, lr_decay_epoch=50,
                      lr_decay_factor=0.1, lam=1.0),
    "shoes": dict(epochs=30, batch_size=16, lr=1e-4, weight_decay=1e-6, lr_decay_epoch=15,
                  lr_decay_factor=0.1, lam=0.6),
    "fashion200k": dict(epochs=50, batch_size=64, lr=1e-4, weight_decay=1e-6, lr_decay_epoch=30,
                        lr_decay_factor=0.1, lam=0.6),
}


def preset(name: str) -> TrainConfig:
    try:
        return TrainConfig(**PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _field_name(key: str) -> str:
    name = KEY_ALIASES.get(key, key)
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return name


def _coerce(name: str, value):
    default = _FIELDS[name].default
    if name == "disabled_modules":
        if isinstance(value, str):
            return tuple(v.strip() for v in value.split(",") if v.strip())
        return tuple(value)
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: cannot read {value!r} as a boolean")
        return bool(value)
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(float(value)) if isinstance(value, str) else int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot read {value!r} as {type(default).__name__}") from None
    return str(value)


def parse_overrides(pairs: Iterable[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not KEY=VALUE")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_config(
    path: Optional[str | Path] = None,
    overrides: Optional[Mapping | Iterable[str]] = None,
    preset_name: Optional[str] = None,
) -> TrainConfig:
    """Build a validated config: preset, then JSON file values, then overrides."""
    if preset_name and preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[preset_name]) if preset_name else {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        if "preset" in raw:
            name = raw.pop("preset")
            if name not in PRESETS:
                raise ConfigError(f"{path}: unknown preset {name!r}")
            values.update(PRESETS[name])
        for key, value in raw.items():
            name = _field_name(key)
            values[name] = _coerce(name, value)
    if overrides:
        if not isinstance(overrides, Mapping):
            overrides = parse_overrides(overrides)
        for key, value in overrides.items():
            name = _field_name(key)
            values[name] = _coerce(name, value)
    return TrainConfig(**values)
