"""
Tests for settings, experiment configuration and seeding
"""
import json
import os
from unittest.mock import patch

import pytest

from mulmon.config import (
    PRESETS,
    Settings,
    apply_overrides,
    derive_seed,
    load_experiment_config,
    parse_override,
    settings_for_log,
)
from mulmon.errors import ConfigError


class TestSettings:
    """Test process settings from the environment"""

    def test_defaults(self, env_clean):
        """Test defaults without MULMON_ variables"""
        settings = Settings()
        assert settings.log_level == "INFO"
        assert settings.deterministic is False

    def test_environment_prefix(self, env_clean):
        """Test MULMON_ variables are picked up"""
        with patch.dict(os.environ, {"MULMON_LOG_LEVEL": "debug", "MULMON_DETERMINISTIC": "true"}):
            settings = Settings()
        assert settings.log_level == "DEBUG"
        assert settings.deterministic is True

    def test_invalid_log_level(self, env_clean):
        """Test an unknown log level is rejected"""
        with patch.dict(os.environ, {"MULMON_LOG_LEVEL": "chatty"}):
            with pytest.raises(ValueError, match="LOG_LEVEL"):
                Settings()

    def test_explicit_device(self, env_clean):
        """Test a fixed device is returned unchanged"""
        assert Settings().resolve_device() == "cpu"

    def test_settings_for_log(self, env_clean):
        """Test the log view lists every setting"""
        assert set(settings_for_log(Settings())) == {"output_root", "log_level", "device", "deterministic"}


class TestExperimentConfig:
    """Test experiment configuration loading"""

    def test_default_is_full_scale(self):
        """Test the defaults carry the full-scale hyperparameters"""
        config = load_experiment_config()
        assert (config.model.num_slots, config.model.z_dims) == (9, 16)
        assert config.train.num_iterations == 5
        assert config.train.initial_lr == 3e-4
        assert config.model.sigma2 == 0.01

    def test_presets(self):
        """Test every preset validates"""
        for name in PRESETS:
            load_experiment_config(preset=name)
        toy = load_experiment_config(preset="toy")
        assert (toy.model.num_slots, toy.train.num_iterations) == (5, 4)

    def test_overrides(self):
        """Test dotted overrides with JSON values"""
        config = load_experiment_config(
            preset="micro", overrides=["train.batch_size=4", "eval.metrics=[\"rmse\"]", "data.name=demo"]
        )
        assert config.train.batch_size == 4
        assert config.eval.metrics == ["rmse"]
        assert config.data.name == "demo"

    def test_unknown_key(self):
        """Test overrides of unknown keys are rejected"""
        with pytest.raises(ConfigError, match="unknown config key"):
            load_experiment_config(overrides=["train.momentum=0.9"])

    def test_invalid_value(self):
        """Test out-of-range values raise ConfigError"""
        with pytest.raises(ConfigError):
            load_experiment_config(overrides=["model.num_slots=0"])

    def test_image_size_consistency(self):
        """Test model and data resolutions must agree"""
        with pytest.raises(ConfigError, match="image_size"):
            load_experiment_config(overrides=["model.image_size=32"])

    def test_config_file(self, tmp_path):
        """Test a JSON file is merged over the preset"""
        path = tmp_path / "experiment.json"
        path.write_text(json.dumps({"train": {"alpha_ig": 10.0}}))
        config = load_experiment_config(path, preset="micro")
        assert config.train.alpha_ig == 10.0
        assert config.model.num_slots == 3

    def test_missing_file(self, tmp_path):
        """Test a missing config file raises ConfigError"""
        with pytest.raises(ConfigError, match="not found"):
            load_experiment_config(tmp_path / "absent.json")

    def test_malformed_file(self, tmp_path):
        """Test invalid JSON raises ConfigError"""
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_experiment_config(path)

    def test_unknown_preset(self):
        """Test unknown presets are rejected"""
        with pytest.raises(ConfigError, match="preset"):
            load_experiment_config(preset="huge")

    def test_new_split_override(self):
        """Test a new split can be added by override"""
        payload = apply_overrides({"data": {"splits": {}}}, ['data.splits.val={"num_scenes": 3}'])
        assert payload["data"]["splits"]["val"] == {"num_scenes": 3}

    def test_parse_override_plain_string(self):
        """Test non-JSON values stay strings"""
        assert parse_override("data.name=toy-mv") == (["data", "name"], "toy-mv")
        with pytest.raises(ConfigError):
            parse_override("no-equals-sign")


class TestSeeds:
    """Test seed derivation"""

    def test_deterministic(self):
        """Test the same root and stream give the same seed"""
        assert derive_seed(3, "train") == derive_seed(3, "train")

    def test_streams_differ(self):
        """Test named streams are independent"""
        seeds = {derive_seed(0, stream) for stream in ("data", "model", "train", "eval")}
        assert len(seeds) == 4
        assert derive_seed(0, "model") != derive_seed(1, "model")
