"""Layered TOML configuration: packaged preset or file, then ``section.key=value`` overrides."""
from __future__ import annotations

import copy
import dataclasses
import sys
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SynthConfig
from .decode import BeamConfig
from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig

# model keys a config file may set; vocab_size / input_dim / n_classes come from the data
MODEL_KEYS = ("n_layers", "n_heads", "d_model", "d_ff", "max_report_len", "pam_kernels", "pam_mode",
              "pam_depthwise", "dropout_rate", "pam_init", "init_seed", "ln_eps")

_model_defaults = ModelConfig()

DEFAULTS = {
    "synth": SynthConfig().to_dict(),
    "model": {k: (list(v) if isinstance(v, tuple) else v)
              for k, v in _model_defaults.to_dict().items() if k in MODEL_KEYS},
    "train": TrainConfig().to_dict(),
    "decode": dataclasses.asdict(BeamConfig()),
    "classify": {"steps": 200, "learning_rate": 1e-3, "full_model": False},
    "experiments": {"mask_ratios": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9], "mask_seed": 1234,
                    "sweep_train_mask_ratio": 0.0},
}


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("migen.presets").iterdir() if p.name.endswith(".toml"))


def _read(source: str) -> dict:
    if source.startswith("preset:"):
        name = source.split(":", 1)[1]
        path = resources.files("migen.presets") / f"{name}.toml"
        if not path.is_file():
            raise ConfigError(f"unknown preset {name!r}; available: {preset_names()}")
        text = path.read_text(encoding="utf-8")
    else:
        try:
            text = Path(source).read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {source} not found") from exc
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config {source}: {exc}") from exc


def _merge(base: dict, update: dict, where: str = "") -> dict:
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key} must be a table")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value
    return base


def parse_override(item: str) -> tuple[list[str], object]:
    key, sep, raw = item.partition("=")
    if not sep or "." not in key:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip().split("."), value


def set_key(cfg: dict, path: list[str], value) -> None:
    node = cfg
    for part in path[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config section {'.'.join(path[:-1])}")
        node = node[part]
    if path[-1] not in node:
        raise ConfigError(f"unknown config key {'.'.join(path)}")
    node[path[-1]] = value


def load_config(source: Optional[str] = None, overrides: Iterable[str] = ()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if source:
        _merge(cfg, _read(source))
    for item in overrides:
        path, value = parse_override(item)
        set_key(cfg, path, value)
    return cfg


def synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig.from_dict(cfg["synth"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"]).validate()


def beam_config(cfg: dict) -> BeamConfig:
    return BeamConfig(**cfg["decode"]).validate()


def model_config(cfg: dict, vocab_size: int, input_dim: int, n_classes: int = 0, **changes) -> ModelConfig:
    values = dict(cfg["model"])
    values.update(changes)
    return ModelConfig(vocab_size=vocab_size, input_dim=input_dim, n_classes=n_classes, **values).validate()
