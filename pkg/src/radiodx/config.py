"""JSON run configuration with strict keys and documented defaults."""
from __future__ import annotations

import copy
import json
import os

from .augmentation import AugmentationPolicy
from .network import HeadSpec
from .training import TrainConfig

DEFAULTS = {
    "seed": 0,
    "init_seed": 0,
    "backbone": "vgg19",
    "input_size": 224,
    "freeze_backbone": True,
    "normalization": "unit",
    "head": {"hidden": [1024, 256], "dropout": 0.0},
    "train": {
        "epochs": 150,
        "batch_size": 32,
        "learning_rate": 1e-4,
        "optimizer": "adam",
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
    },
    "augmentation": {
        "rotation_max": 15.0,
        "shear_max": 10.0,
        "shift_max": 0.1,
        "zoom_range": [0.9, 1.1],
        "fill_value": 0.0,
    },
    "paths": {"train_manifest": None, "val_manifest": None, "init_weights": None},
}

# sections that may be set to null to disable them
NULLABLE = {"augmentation"}


class ConfigError(ValueError):
    pass


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = f"{where}.{key}" if where else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(defaults[key], dict):
            if value is None and key in NULLABLE:
                out[key] = None
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            out[key] = _merge(defaults[key], value, path)
        else:
            out[key] = value
    return out


def resolve(raw: dict, base_dir: str | None = None) -> dict:
    """Fill defaults, reject unknown keys and make relative paths absolute."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, raw, "")
    if cfg["backbone"] not in ("vgg19", "tiny"):
        raise ConfigError(f"backbone must be vgg19 or tiny, got {cfg['backbone']!r}")
    if cfg["normalization"] not in ("unit", "imagenet"):
        raise ConfigError(f"normalization must be unit or imagenet, got {cfg['normalization']!r}")
    if base_dir:
        for key, value in cfg["paths"].items():
            if value is not None and not os.path.isabs(value):
                cfg["paths"][key] = os.path.normpath(os.path.join(base_dir, value))
    # construct once so value errors surface at load time
    train_config(cfg)
    head_spec(cfg)
    return cfg


def load(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return resolve(raw, os.path.dirname(os.path.abspath(path)))


def augmentation_policy(cfg: dict) -> AugmentationPolicy | None:
    aug = cfg["augmentation"]
    if aug is None:
        return None
    return AugmentationPolicy(aug["rotation_max"], aug["shear_max"], aug["shift_max"],
                              tuple(aug["zoom_range"]), aug["fill_value"])


def head_spec(cfg: dict) -> HeadSpec:
    return HeadSpec(tuple(cfg["head"]["hidden"]), cfg["head"]["dropout"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(run_seed=cfg["seed"], augmentation=augmentation_policy(cfg),
                       input_size=cfg["input_size"], normalization=cfg["normalization"], **cfg["train"])
