"""Run configuration: JSON with a versioned schema, defaults, and presets.

Keys starting with ``_`` are annotations (where a default comes from) and are
ignored by the code. Unknown keys are rejected.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from dragen import SCHEMA_VERSION
from dragen.envs import (ConfigError, DistributionConfig, default_test_config, default_train_config,
                         validate_shift)

METHODS = ("dragen", "dr", "gaussian", "none")

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "preset": "desk",
    "grid_size": 16,
    "data": {
        "n_train": 200,
        "n_test": 200,
        "seed": 0,
        "train": default_train_config().to_dict(),
        "test": default_test_config().to_dict(),
    },
    "run": {
        "method": "dragen",
        "iterations": 10,
        "K": 96,
        "seed": 0,
        "workers": 1,
    },
    "policy": {
        "pretrain_steps": 1000,
        "steps": 1000,
        "lr": 3e-3,
        "batch_size": 128,
        "replay_capacity": 1000,
        "replay_ratio": 4,
        "eps_start": 1.0,
        "eps_end": 0.2,
    },
    "embed": {
        "latent_dim": 16,
        "hidden": 64,
        "predictor_hidden": 16,
        "alpha_pred": 0.1,
        "alpha_lip": 1.0,
        "alpha_norm": 0.1,
        "lip_target": 0.04,
        "lr": 1e-3,
        "batch_size": 4,
        "first_epochs": 200,
        "epochs": 50,
        "sn_iters": 5,
    },
    "ascent": {
        "eta": 2.0,
        "lam": 0.005,
        "max_steps": 100,
        "target_frac": 0.1,
        "penalty": "prox",
        "extrude": True,
    },
    "gaussian": {"sigma": 0.05},
    "eval": {"frictions": [0.3, 0.4, 0.5]},
}

PRESETS = {
    "desk": {},
    "paper": {"run": {"iterations": 30}, "policy": {"pretrain_steps": 5000, "steps": 5000}},
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key.startswith("_"):
            out[key] = value
            continue
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and key not in ("train", "test"):
            if not isinstance(value, dict):
                raise ConfigError(f"{path + key!r} must be an object")
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(user=None, preset=None, **run_overrides):
    """Defaults, then preset, then the user's config, then explicit overrides."""
    user = user or {}
    preset = preset or user.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = _merge(DEFAULTS, PRESETS[preset])
    cfg = _merge(cfg, user)
    cfg["preset"] = preset
    for key, value in run_overrides.items():
        if value is not None:
            cfg["run"][key] = value
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    run = cfg["run"]
    if run["method"] not in METHODS:
        raise ConfigError(f"unknown method {run['method']!r}; choose from {METHODS}")
    if run["iterations"] < 1 or run["K"] < 0:
        raise ConfigError("need iterations >= 1 and K >= 0")
    if run["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    train = DistributionConfig.from_dict(cfg["data"]["train"])
    test = DistributionConfig.from_dict(cfg["data"]["test"])
    validate_shift(train, test)
    if cfg["gaussian"]["sigma"] < 0:
        raise ConfigError("gaussian.sigma must be >= 0")
    if not cfg["eval"]["frictions"] or min(cfg["eval"]["frictions"]) <= 0:
        raise ConfigError("eval.frictions must be positive and non-empty")
    return cfg


def load(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def dump(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
