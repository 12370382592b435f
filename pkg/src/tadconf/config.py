"""Layered run configuration: built-in defaults < config file < ``--set`` overrides.

Files may be JSON or YAML (chosen by extension). Every key must already
exist in the defaults, so typos fail loudly instead of being ignored.
"""
from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path

import yaml

from .decode import DecodeConfig, canonical_fusion
from .evaluation import EPIC_THRESHOLDS
from .losses import LossConfig, TrainConfig
from .synth import SynthConfig


def _defaults() -> dict:
    synth = SynthConfig().to_dict()
    loss = {f.name: getattr(LossConfig(), f.name) for f in fields(LossConfig) if f.name != "sigma"}
    decode = {f.name: getattr(DecodeConfig(), f.name) for f in fields(DecodeConfig) if f.name != "sigma"}
    train = {k: getattr(TrainConfig(), k) for k in ("steps", "lr", "momentum", "batch_size", "seed")}
    return {
        "synth": synth,
        "model": {"hidden": 64, "init_seed": 0, "confidence_mode": "gaussian", "sigma": 5.5},
        "assign": {"alpha": 3, "num_levels": 6, "scale_factor": 2},
        "loss": loss,
        "train": train,
        "decode": decode,
        "eval": {"thresholds": list(EPIC_THRESHOLDS), "curve_budgets": [0.0, 0.25, 0.5, 1.0, 2.0, 4.0]},
    }


DEFAULTS = _defaults()


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, where: str = ""):
    for key, val in update.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            _merge(base[key], val, path)
        else:
            base[key] = val


def load_file(path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def parse_override(text: str) -> dict:
    """``section.key=value`` -> nested dict; the value is read as a YAML scalar or list."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    dotted, raw = text.split("=", 1)
    val = yaml.safe_load(raw) if raw.strip() else None
    out: dict = {}
    node = out
    parts = dotted.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = val
    return out


def build_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        _merge(cfg, load_file(path))
    for ov in overrides:
        _merge(cfg, parse_override(ov))
    validate(cfg)
    return cfg


def validate(cfg: dict):
    try:
        synth_config(cfg).validate()
        canonical_fusion(cfg["decode"]["fusion"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not cfg["model"]["sigma"] > 0:
        raise ConfigError("model.sigma must be positive")
    if cfg["assign"]["alpha"] < 1:
        raise ConfigError("assign.alpha must be >= 1")
    if not cfg["eval"]["thresholds"]:
        raise ConfigError("eval.thresholds must not be empty")


def synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig.from_dict(dict(cfg["synth"]))


def loss_config(cfg: dict) -> LossConfig:
    return LossConfig(sigma=float(cfg["model"]["sigma"]), **cfg["loss"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(steps=int(t["steps"]), lr=float(t["lr"]), momentum=float(t["momentum"]),
                       batch_size=int(t["batch_size"]), seed=int(t["seed"]),
                       alpha=int(cfg["assign"]["alpha"]), loss=loss_config(cfg))


def decode_config(cfg: dict) -> DecodeConfig:
    return DecodeConfig(**cfg["decode"])
