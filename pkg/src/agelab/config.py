"""Run configuration: nested YAML with a default for every key.

Unknown keys are rejected so typos surface immediately.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .nn import ConfigError

DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/default",
    "data": {
        "manifest": "",
        "overrides": "",
        "train_manifest": "",
        "val_manifest": "",
        "test_manifest": "",
        "image_size": [64, 64],  # width, height
        "channels": 1,
        "age_range": [16, 77],
    },
    "subset": {
        "size": None,  # None -> proportional to the roster
        "strict_subjects": False,
    },
    "synth": {
        "count": 2000,
        "size": 64,
        "noise": 10.0,
        "male_fraction": 0.75,
        "age_min": 16,
        "age_max": 77,
        "radius_scale": 0.4,
    },
    "model": {
        "head": "gender",
        "stacks": [[8, 1], [16, 1]],
        "dense_sizes": [512, 512],
        "dropout": 0.5,
        "init_checkpoint": "",
        "freeze_backbone": False,
    },
    "train": {
        "batch_size": 50,
        "epochs": 60,
        "serial_splits": 1,
        "val_sample_size": 500,
        "loss": "auto",
        "input_mode": "standardize",
        "augment": False,
        "crop": None,  # [width, height]
        "rho": 0.95,
        "epsilon": 1e-6,
    },
    "encoding": {
        "kind": "ldae",
        "alpha": 2.5,  # number, or "lo-hi" for a linear schedule
        "decoder": "expected_value",
        "ages": [30],
    },
    "eval": {
        "checkpoint": "",
        "single_checkpoint": "",
        "gender_checkpoint": "",
        "male_checkpoint": "",
        "female_checkpoint": "",
    },
    "augment": {
        "crop": [56, 56],
    },
    "sweep": {
        "axis": "epochs",
        "values": [1, 2],
    },
}


def _merge(base, override, path=""):
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def parse_assignment(text):
    """``"train.epochs=3"`` -> ``{"train": {"epochs": 3}}`` (value parsed as YAML)."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"expected key=value, got {text!r}")
    value = yaml.safe_load(raw)
    for part in reversed(key.strip().split(".")):
        value = {part: value}
    return value


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, loaded)
    for item in overrides:
        _merge(cfg, item if isinstance(item, dict) else parse_assignment(item))
    return cfg


def dump_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))
