import json
from unittest.mock import mock_open, patch

import pytest
import yaml

from puzzle_ae import config
from puzzle_ae.config import (
    TRAIN_CONFIG,
    ConfigError,
    apply_overrides,
    load_run_config,
    load_train_config,
    resolve_device,
)
from puzzle_ae.models import PermMode, Protocol

VALID_YAML = """\
dataset:
  format: synthetic
  canvas_size: [16, 16]
train:
  epochs: 3
  puzzle:
    canvas_size: [16, 16]
"""


class TestTrainConfig:
    """Test default run configuration loading."""

    def test_load_train_config_file_exists(self):
        """Test loading the YAML document when the file exists."""
        document = {"normal_class": 3, "train": {"epochs": 7}}
        with patch("builtins.open", mock_open(read_data=yaml.dump(document))):
            loaded = load_train_config()
        assert loaded["normal_class"] == 3
        assert loaded["train"]["epochs"] == 7

    def test_load_train_config_file_not_found(self):
        """Test the built-in defaults when no file exists."""
        with patch("builtins.open", side_effect=FileNotFoundError):
            loaded = load_train_config()
        assert loaded["dataset"]["format"] == "synthetic"
        assert loaded["train"]["puzzle"]["perm_mode"] == "at_least_two"

    def test_train_config_loaded_on_import(self):
        """Test that TRAIN_CONFIG is loaded on module import."""
        assert TRAIN_CONFIG is not None
        assert "train" in TRAIN_CONFIG

    def test_train_config_path_respected(self, tmp_path):
        """Test that TRAIN_CONFIG_PATH is read at call time."""
        path = tmp_path / "custom.yaml"
        path.write_text("normal_class: 5\n")
        with patch("puzzle_ae.config.TRAIN_CONFIG_PATH", str(path)):
            assert load_train_config() == {"normal_class": 5}


class TestLoadRunConfig:
    """Test validation, overrides and diagnostics."""

    def test_defaults_validate(self):
        cfg = load_run_config()
        assert cfg.protocol == Protocol.TWO
        assert cfg.train.puzzle.perm_mode == PermMode.AT_LEAST_TWO

    def test_defaults_not_mutated_by_overrides(self):
        before = json.dumps(TRAIN_CONFIG, sort_keys=True, default=str)
        load_run_config(overrides={"train.epochs": 2})
        assert json.dumps(TRAIN_CONFIG, sort_keys=True, default=str) == before

    def test_yaml_file(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(VALID_YAML)
        cfg = load_run_config(path)
        assert cfg.train.epochs == 3
        assert cfg.dataset.canvas_size == (16, 16)

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(VALID_YAML)
        cfg = load_run_config(path, {"train.epochs": 9, "train.attack.epsilon": 0.1, "seed": None})
        assert cfg.train.epochs == 9
        assert cfg.train.attack.epsilon == 0.1

    def test_error_names_key_and_line(self, tmp_path):
        """Test a bad value is reported as file:line: dotted.key."""
        path = tmp_path / "run.yaml"
        path.write_text(VALID_YAML.replace("epochs: 3", "epochs: 0"))
        with pytest.raises(ConfigError) as excinfo:
            load_run_config(path)
        message = str(excinfo.value)
        assert f"{path}:5: train.epochs" in message

    def test_unknown_enum(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("protocol: '9'\n")
        with pytest.raises(ConfigError, match=r":1: protocol"):
            load_run_config(path)

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("train:\n  epochs: [1,\n")
        with pytest.raises(ConfigError, match="invalid YAML"):
            load_run_config(path)

    def test_non_mapping(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="expected a mapping"):
            load_run_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_run_config(tmp_path / "missing.yaml")

    def test_manifest_replay(self, tmp_path):
        """Test a run manifest is accepted and its recorded config is used."""
        recorded = load_run_config().model_dump(mode="json")
        recorded["train"]["epochs"] = 4
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"command": "train", "config": recorded, "seed": 0}))
        cfg = load_run_config(path)
        assert cfg.train.epochs == 4


class TestHelpers:
    def test_apply_overrides_creates_sections(self):
        document = {}
        apply_overrides(document, {"train.puzzle.perm_mode": "exactly_two", "normal_class": None})
        assert document == {"train": {"puzzle": {"perm_mode": "exactly_two"}}}

    def test_resolve_device_explicit(self):
        assert resolve_device("cpu") == "cpu"

    def test_resolve_device_auto(self):
        with patch("puzzle_ae.config.torch.cuda.is_available", return_value=False):
            assert resolve_device("auto") == "cpu"

    def test_config_class(self):
        cfg = config.Config()
        assert cfg.get_run_config().normal_class == TRAIN_CONFIG.get("normal_class", 0)
