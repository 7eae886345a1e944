import copy

import pytest
import yaml

from src.config import (
    DEFAULT_CONFIG,
    architecture_from_config,
    load_config,
    loss_config,
    rng_for,
    schedule_for,
    task_split,
    validate_config,
)
from src.errors import ConfigError


def _write(tmp_path, data, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return str(path)


def test_default_file_matches_defaults():
    assert load_config() == DEFAULT_CONFIG


def test_user_file_overrides_single_keys(tmp_path):
    config = load_config(_write(tmp_path, {"seed": 7, "losses": {"gamma": -1.0}}))
    assert config["seed"] == 7
    assert config["losses"]["gamma"] == -1.0
    assert config["losses"]["beta"] == DEFAULT_CONFIG["losses"]["beta"]


def test_overrides_apply_after_the_file(tmp_path):
    config = load_config(_write(tmp_path, {"seed": 7}), overrides={"seed": 9, "bit_exact": True})
    assert config["seed"] == 9
    assert config["bit_exact"] is True


def test_json_files_are_accepted(tmp_path):
    path = tmp_path / "config.json"
    path.write_text('{"eval": {"top_k": 2}}', encoding="utf-8")
    assert load_config(str(path))["eval"]["top_k"] == 2


def test_unknown_key_is_rejected(tmp_path):
    with pytest.raises(ConfigError, match="losses.delta"):
        load_config(_write(tmp_path, {"losses": {"delta": 1.0}}))


def test_section_replaced_by_scalar_is_rejected(tmp_path):
    with pytest.raises(ConfigError, match="must be a section"):
        load_config(_write(tmp_path, {"losses": 3}))


def test_missing_file_is_rejected(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(str(tmp_path / "absent.yaml"))


@pytest.mark.parametrize(
    "section,key,value,message",
    [
        ("losses", "epsilon", 1.5, "epsilon"),
        ("losses", "lambda_in1", 0.0, None),
        ("losses", "lambda_m", [1.0], "lambda_m"),
        ("teachers", "image_shape", [1, 8, 8], "square RGB"),
        ("teachers", "customized_labels", [13], "not covered"),
        ("teachers", "strides", [1, 3], "divide"),
        ("branch", "window", 0, "window"),
        ("eval", "top_k", 0, "top_k"),
        ("dataset", "train_size", 50, "train_size"),
    ],
)
def test_validation_rejects_bad_values(tiny_config, section, key, value, message):
    config = copy.deepcopy(tiny_config)
    config[section][key] = value
    if section == "losses" and key == "lambda_in1":
        config["losses"]["lambda_in2"] = 0.0
        message = "both be zero"
    with pytest.raises(ConfigError, match=message):
        validate_config(config)


def test_tiny_config_is_valid(tiny_config):
    validate_config(tiny_config)
    assert architecture_from_config(tiny_config).num_blocks == 2
    assert task_split(tiny_config).selected_indices(2) == [0, 1, 3]
    assert loss_config(tiny_config).lambda_in2 == 1.0


def test_schedule_overlays_stage_keys(tiny_config):
    pretrain = schedule_for(tiny_config, "pretrain")
    assert pretrain.optimizer == "adam"
    assert pretrain.iterations == 3
    assert pretrain.batch_size == 4
    dual = schedule_for(tiny_config, "dual")
    assert dual.optimizer == "sgd"
    assert dual.iterations == 3
    assert dual.momentum == 0.9


def test_rng_for_is_deterministic_and_component_specific():
    first = rng_for(3, "generator/noise").random(4)
    again = rng_for(3, "generator/noise").random(4)
    other = rng_for(3, "dual/noise/block1").random(4)
    reseeded = rng_for(4, "generator/noise").random(4)
    assert (first == again).all()
    assert not (first == other).all()
    assert not (first == reseeded).all()
