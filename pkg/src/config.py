"""Pipeline configuration: defaults, file loading, validation and seeding."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import yaml

from src.errors import ConfigError
from src.models import LossConfig, Schedule, TaskSplit
from src.networks import Architecture

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "data" / "pipeline_config.yaml"

DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "bit_exact": False,
    "dataset": {
        "num_labels": 12,
        "train_size": 2000,
        "eval_size": 500,
        "positive_rate": 0.3,
        "min_marginal": 0.1,
        "max_marginal": 0.6,
    },
    "teachers": {
        "label_sets": [[0, 1, 2, 3, 4, 5, 6], [5, 6, 7, 8, 9, 10, 11]],
        "customized_labels": [0, 2, 4, 5, 6, 8, 9, 11],
        "image_shape": [3, 32, 32],
        "widths": [16, 32, 64, 128],
        "strides": [1, 2, 2, 2],
        "leaky_slope": 0.2,
        "pretrain": {
            "optimizer": "adam",
            "iterations": 1500,
            "batch_size": 32,
            "base_lr": 0.001,
            "weight_decay": 0.0,
        },
    },
    "generator": {"noise_dim": 64, "filter_reduction": 4, "iterations": 2000},
    "losses": {
        "epsilon": 0.5,
        "alpha": 0.1,
        "beta": 5.0,
        "gamma": 1.0,
        "lambda_m": [],
        "lambda_in1": 1.0,
        "lambda_in2": 1.0,
    },
    "optimizer": {
        "optimizer": "sgd",
        "base_lr": 0.01,
        "power": 0.9,
        "momentum": 0.9,
        "weight_decay": 0.005,
        "batch_size": 16,
        "log_every": 50,
    },
    "dual": {"iterations": 1000, "filter_reduction": 4},
    "branch": {"window": 50},
    "finetune": {"iterations": 500, "fixed_pool": False, "pool_size": 512},
    "eval": {"top_k": 3, "batch_size": 100},
    "baselines": {
        "kinds": ["random_noise", "similar_data", "diff_data", "unlabeled_real", "dafl_style"],
        "iterations": 1000,
        "pool_size": 2000,
    },
    "ablation": {
        "lambda_in_grid": [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
        "discrete_samples": 512,
    },
}

SCHEDULE_KEYS = ("optimizer", "iterations", "batch_size", "base_lr", "power", "momentum", "weight_decay", "log_every")


def _read_file(path: Path) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        if path.suffix.lower() in (".yaml", ".yml"):
            data = yaml.safe_load(f) or {}
        else:
            data = json.load(f)
    if not isinstance(data, dict):
        raise ConfigError(f"configuration {path} must be a mapping at the top level")
    return data


def _merge(base: Dict[str, Any], override: Dict[str, Any], where: str = "") -> Dict[str, Any]:
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown configuration key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"configuration key {where}{key} must be a section")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value
    return base


def load_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Merge the user's file (or the default file) section by section over the defaults."""

    config = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"configuration file {config_path} does not exist")
        _merge(config, _read_file(path))
    elif DEFAULT_CONFIG_PATH.exists():
        _merge(config, _read_file(DEFAULT_CONFIG_PATH))
    if overrides:
        _merge(config, overrides)
    validate_config(config)
    return config


def validate_config(config: Dict[str, Any]) -> None:
    try:
        loss_config(config)
        architecture_from_config(config)
        task_split(config)
        for stage in ("pretrain", "generator", "dual", "finetune", "baselines"):
            schedule = schedule_for(config, stage)
            if stage != "finetune" and schedule.iterations < 1:
                raise ConfigError(f"{stage}.iterations must be positive, got {schedule.iterations}")
    except (ValueError, TypeError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {exc}") from exc
    losses = config["losses"]
    if losses["lambda_in1"] == 0 and losses["lambda_in2"] == 0:
        raise ConfigError("losses.lambda_in1 and losses.lambda_in2 cannot both be zero")
    if losses["lambda_m"] and len(losses["lambda_m"]) != len(config["teachers"]["label_sets"]):
        raise ConfigError("losses.lambda_m needs one weight per teacher")
    channels, height, width = config["teachers"]["image_shape"]
    if channels != 3 or height != width:
        raise ConfigError(f"teachers.image_shape must be square RGB [3, S, S], got {config['teachers']['image_shape']}")
    dataset = config["dataset"]
    if dataset["num_labels"] < 4 or dataset["train_size"] < 200:
        raise ConfigError("dataset needs num_labels >= 4 and train_size >= 200")
    every = [label for labels in config["teachers"]["label_sets"] for label in labels]
    if any(not 0 <= label < dataset["num_labels"] for label in every):
        raise ConfigError(f"teachers.label_sets reference labels outside [0, {dataset['num_labels']})")
    if config["branch"]["window"] < 1:
        raise ConfigError("branch.window must be positive")
    if config["eval"]["top_k"] < 1:
        raise ConfigError("eval.top_k must be positive")


def loss_config(config: Dict[str, Any]) -> LossConfig:
    return LossConfig(**config["losses"])


def architecture_from_config(config: Dict[str, Any]) -> Architecture:
    teachers = config["teachers"]
    return Architecture(
        image_shape=tuple(teachers["image_shape"]),
        widths=tuple(teachers["widths"]),
        strides=tuple(teachers["strides"]),
        leaky_slope=float(teachers["leaky_slope"]),
    )


def task_split(config: Dict[str, Any]) -> TaskSplit:
    teachers = config["teachers"]
    return TaskSplit(label_sets=teachers["label_sets"], customized=teachers["customized_labels"])


def schedule_for(config: Dict[str, Any], stage: str) -> Schedule:
    """Optimiser section overlaid with the stage's own keys."""

    values = {k: v for k, v in config["optimizer"].items() if k in SCHEDULE_KEYS}
    section = config["teachers"]["pretrain"] if stage == "pretrain" else config[stage]
    values.update({k: v for k, v in section.items() if k in SCHEDULE_KEYS})
    return Schedule(**values)


def rng_for(seed: int, component: str) -> np.random.Generator:
    """Independent generator for one named component of a seeded run."""

    key = int.from_bytes(hashlib.sha256(component.encode("utf-8")).digest()[:4], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))
