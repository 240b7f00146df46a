"""
Configuration management: process settings from the environment, experiment
configuration from a JSON file plus dotted overrides
"""
from __future__ import annotations

import json
import zlib
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError

ShapeName = Literal["circle", "square", "triangle", "diamond"]


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_prefix="MULMON_", case_sensitive=False, extra="ignore")

    output_root: str = "./runs"
    log_level: str = "INFO"
    device: Literal["cpu", "cuda", "auto"] = "auto"
    deterministic: bool = False

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, value: str) -> str:
        normalized = value.upper()
        valid_levels = {"CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"}
        if normalized not in valid_levels:
            raise ValueError(f"LOG_LEVEL must be one of: {', '.join(sorted(valid_levels))}")
        return normalized

    def resolve_device(self) -> str:
        if self.device != "auto":
            return self.device
        import torch

        return "cuda" if torch.cuda.is_available() else "cpu"


def settings_for_log(settings: Settings) -> dict:
    return {
        "output_root": settings.output_root,
        "log_level": settings.log_level,
        "device": settings.device,
        "deterministic": settings.deterministic,
    }


def get_settings() -> Settings:
    return Settings()


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SplitConfig(_Strict):
    num_scenes: int = Field(..., ge=1)
    shapes: list[ShapeName] = Field(default_factory=lambda: ["circle", "square", "triangle"], min_length=1)


class SceneGenConfig(_Strict):
    """Procedural dataset description; stored verbatim in the dataset manifest."""

    name: str = "toy-mv"
    image_size: int = Field(64, ge=8)
    views_per_scene: int = Field(10, ge=2)
    min_objects: int = Field(1, ge=1)
    max_objects: int = Field(3, ge=1)
    object_size_range: tuple[float, float] = (0.18, 0.32)
    scene_radius: float = Field(1.0, gt=0)
    camera_radius_range: tuple[float, float] = (3.5, 4.5)
    camera_elevation: float = Field(0.5, gt=0, lt=1.5)
    azimuth_sampling: Literal["even", "uniform"] = "uniform"
    metal_probability: float = Field(0.5, ge=0, le=1)
    placement_retries: int = Field(200, ge=1)
    rng_seed: int = 0
    splits: dict[str, SplitConfig] = Field(
        default_factory=lambda: {
            "train": SplitConfig(num_scenes=500),
            "test": SplitConfig(num_scenes=100),
        }
    )
    workers: int = Field(1, ge=1)

    @field_validator("object_size_range", "camera_radius_range")
    @classmethod
    def validate_range(cls, value: tuple[float, float], info):
        low, high = value
        if not 0 < low <= high:
            raise ValueError(f"{info.field_name} must satisfy 0 < low <= high")
        return value

    @model_validator(mode="after")
    def validate_object_counts(self):
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must be <= max_objects")
        if self.camera_radius_range[0] <= self.scene_radius:
            raise ValueError("cameras must stay outside the scene radius")
        return self


class ModelConfig(_Strict):
    num_slots: int = Field(9, ge=1)
    z_dims: int = Field(16, ge=1)
    v_dims: int = Field(3, ge=1)
    image_size: int = Field(64, ge=4)
    sigma2: float = Field(0.01, gt=0)
    transform_hidden: int = Field(512, ge=1)
    decoder_channels: int = Field(32, ge=1)
    decoder_layers: int = Field(4, ge=1)
    refine_channels: tuple[int, int, int, int] = (32, 32, 64, 64)
    refine_pool: int | None = Field(None, ge=1, description="average-pool the refinement features to this grid before flattening")
    refine_hidden: int = Field(256, ge=1)
    refine_features: int = Field(128, ge=1)
    lstm_hidden: int = Field(128, ge=1)


class TrainConfig(_Strict):
    num_iterations: int = Field(5, ge=1, description="L, inner-loop refinement steps")
    alpha_ig: float = Field(1.0, ge=0)
    batch_size: int = Field(8, ge=1)
    total_steps: int = Field(300_000, ge=1)
    initial_lr: float = Field(3e-4, gt=0)
    lr_decay_steps: float = Field(6e5, gt=0)
    max_observed: int = Field(5, ge=1)
    checkpoint_every: int = Field(1000, ge=1)
    keep_checkpoints: int = Field(3, ge=1)
    log_every: int = Field(1, ge=1)
    seed: int = 0


class EvalConfig(_Strict):
    metrics: list[Literal["miou", "rmse", "pred_seg", "uncertainty", "dci"]] = Field(
        default_factory=lambda: ["miou", "rmse", "pred_seg"]
    )
    split: str = "test"
    num_observed: int = Field(5, ge=1)
    num_seeds: int = Field(5, ge=1)
    num_samples: int = Field(10, ge=2)
    num_orderings: int = Field(5, ge=1)
    max_views_uncertainty: int = Field(5, ge=1)
    matching: Literal["hungarian", "greedy", "best"] = "hungarian"
    include_background: bool = True
    mean_latent: bool = True
    batch_size: int = Field(8, ge=1)
    dci_trees: int = Field(100, ge=1)
    dci_min_instances: int = Field(100, ge=2)


class ExperimentConfig(_Strict):
    data: SceneGenConfig = Field(default_factory=SceneGenConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    seed: int = 0

    @model_validator(mode="after")
    def validate_consistency(self):
        if self.model.image_size != self.data.image_size:
            raise ValueError("model.image_size must match data.image_size")
        return self


PRESETS: dict[str, dict[str, Any]] = {
    "full": {},
    "toy": {
        "data": {
            "splits": {
                "unseen_shape": {"num_scenes": 100, "shapes": ["circle", "square", "triangle", "diamond"]},
            },
        },
        "model": {"num_slots": 5, "image_size": 64, "refine_pool": 16},
        "train": {"num_iterations": 4, "total_steps": 30_000, "checkpoint_every": 2_000},
    },
    "micro": {
        "data": {
            "image_size": 16,
            "views_per_scene": 4,
            "splits": {"train": {"num_scenes": 8}, "test": {"num_scenes": 4}},
        },
        "model": {
            "num_slots": 3,
            "z_dims": 4,
            "image_size": 16,
            "transform_hidden": 16,
            "decoder_channels": 8,
            "decoder_layers": 2,
            "refine_channels": (8, 8, 8, 8),
            "refine_hidden": 16,
            "refine_features": 16,
            "lstm_hidden": 16,
        },
        "train": {"num_iterations": 2, "batch_size": 2, "total_steps": 4, "checkpoint_every": 2},
        "eval": {"num_seeds": 2, "num_samples": 3, "num_orderings": 2, "max_views_uncertainty": 3, "batch_size": 2},
    },
}


def _deep_merge(base: dict, patch: dict) -> dict:
    merged = dict(base)
    for key, value in patch.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_override(raw: str) -> tuple[list[str], Any]:
    if "=" not in raw:
        raise ConfigError(f"override must look like section.key=value: {raw!r}")
    key, _, text = raw.partition("=")
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(f"override has an empty key: {raw!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return path, value


def apply_overrides(payload: dict, overrides: list[str]) -> dict:
    updated = json.loads(json.dumps(payload))
    for raw in overrides:
        path, value = parse_override(raw)
        node = updated
        for part in path[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                raise ConfigError(f"unknown config key: {'.'.join(path)}")
            node = child
        if path[-1] not in node and not _is_open_mapping(path):
            raise ConfigError(f"unknown config key: {'.'.join(path)}")
        node[path[-1]] = value
    return updated


def _is_open_mapping(path: list[str]) -> bool:
    # split names are user-chosen keys
    return len(path) == 3 and path[:2] == ["data", "splits"]


def load_experiment_config(
    path: str | Path | None = None,
    overrides: list[str] | None = None,
    preset: str | None = None,
) -> ExperimentConfig:
    payload: dict = ExperimentConfig().model_dump(mode="json")
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        payload = _deep_merge(payload, json.loads(json.dumps(PRESETS[preset])))
    if path is not None:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"config file not found: {config_path}")
        try:
            payload = _deep_merge(payload, json.loads(config_path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {config_path} is not valid JSON: {e}") from e
    payload = apply_overrides(payload, overrides or [])
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def derive_seed(root_seed: int, stream: str) -> int:
    """Seed for a named substream (data/model/train/eval) of one root seed."""
    sequence = np.random.SeedSequence(entropy=root_seed, spawn_key=(zlib.crc32(stream.encode("utf-8")),))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])
