import copy
import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure the src package is importable when running tests from repo root
ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.append(str(ROOT))

from src.config import DEFAULT_CONFIG  # noqa: E402
from src.networks import Architecture, TeacherNet  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: toy-scale end-to-end runs; select with -m slow")


def pytest_collection_modifyitems(config, items):
    if "slow" in (config.getoption("-m") or ""):
        return
    skip = pytest.mark.skip(reason="slow end-to-end run; use -m slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    return Architecture(image_shape=(3, 8, 8), widths=(4, 8), strides=(1, 2))


@pytest.fixture
def three_block_arch():
    return Architecture(image_shape=(3, 16, 16), widths=(4, 6, 8), strides=(2, 2, 2))


@pytest.fixture
def tiny_teachers(tiny_arch):
    """Two frozen random teachers over labels [0..3] and [2..5]."""

    teachers = [
        TeacherNet(tiny_arch, ["a", "b", "c", "d"], np.random.default_rng(1)),
        TeacherNet(tiny_arch, ["c", "d", "e", "f"], np.random.default_rng(2)),
    ]
    for teacher in teachers:
        teacher.freeze()
    return teachers


@pytest.fixture
def tiny_config():
    """Defaults shrunk to an 8x8 two-block network and a handful of iterations."""

    config = copy.deepcopy(DEFAULT_CONFIG)
    config["teachers"].update(
        {
            "label_sets": [[0, 1, 2, 3], [2, 3, 4, 5]],
            "customized_labels": [0, 2, 3, 5],
            "image_shape": [3, 8, 8],
            "widths": [4, 8],
            "strides": [1, 2],
        }
    )
    config["teachers"]["pretrain"].update({"iterations": 3, "batch_size": 4})
    config["dataset"].update({"num_labels": 6, "train_size": 200, "eval_size": 200})
    config["generator"].update({"noise_dim": 8, "iterations": 3})
    config["optimizer"].update({"batch_size": 4, "log_every": 0})
    config["dual"]["iterations"] = 3
    config["branch"]["window"] = 2
    config["finetune"].update({"iterations": 2, "pool_size": 8})
    config["eval"]["batch_size"] = 64
    config["baselines"].update({"iterations": 2, "pool_size": 16})
    config["ablation"]["discrete_samples"] = 16
    return config
