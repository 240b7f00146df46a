"""
Checkpoint-backed model access for prediction, traversal and sampling.
"""
from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..config import ExperimentConfig, derive_seed
from ..evaluation import latent_traversal, observe_scene, predict_novel_view
from ..generative import RenderedScene, generate_random_scene
from ..latent_state import LatentSlots
from ..network import MulMONNetwork, build_model
from ..scene_data import SceneRecord, encode_viewpoint
from .cache import SceneCache
from .checkpoints import checkpoint_config, read_checkpoint, restore_model

logger = logging.getLogger(__name__)


class ModelService:
    """
    Loads a trained network from a checkpoint and answers scene queries.

    Posteriors are cached per (scene, observed views, slot count); each is computed
    with a generator seeded from the scene id so repeated queries agree.
    """

    def __init__(self, checkpoint_path: str | Path, device: str = "cpu", posterior_cache_size: int = 64):
        self.checkpoint_path = Path(checkpoint_path)
        self.device = device
        self.model: MulMONNetwork | None = None
        self.config: ExperimentConfig | None = None
        self.step = 0
        self.posterior_cache: SceneCache[tuple, LatentSlots] = SceneCache(posterior_cache_size)

    def initialize(self) -> None:
        payload = read_checkpoint(self.checkpoint_path)
        self.config = checkpoint_config(payload)
        model = build_model(self.config.model)
        self.step = restore_model(payload, model)
        self.model = model.to(self.device).eval()
        logger.info("Loaded checkpoint %s (step %s)", self.checkpoint_path, self.step)

    def _require(self) -> tuple[MulMONNetwork, ExperimentConfig]:
        if self.model is None or self.config is None:
            raise RuntimeError("ModelService not initialized. Call initialize() first.")
        return self.model, self.config

    def _dtype(self) -> torch.dtype:
        model, _ = self._require()
        return next(model.parameters()).dtype

    def _tensor(self, array: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(np.asarray(array)).to(device=self.device, dtype=self._dtype())

    def observe(self, scene: SceneRecord, view_indices: Sequence[int], num_slots: int | None = None) -> LatentSlots:
        model, config = self._require()
        if not view_indices:
            raise ValueError("at least one observed view is required")
        for index in view_indices:
            if not 0 <= index < len(scene.views):
                raise IndexError(f"view {index} out of range for scene {scene.scene_id} with {len(scene.views)} views")
        key = (scene.scene_id, tuple(view_indices), num_slots)
        cached = self.posterior_cache.get(key)
        if cached is not None:
            return cached
        images = self._tensor(scene.images[list(view_indices)]).unsqueeze(0)
        viewpoints = self._tensor(scene.viewpoints[list(view_indices)]).unsqueeze(0)
        generator = torch.Generator(device="cpu").manual_seed(derive_seed(config.seed, f"observe-{scene.scene_id}"))
        posterior = observe_scene(model, images, viewpoints, config.train.num_iterations, num_slots, generator).index(0)
        self.posterior_cache.set(key, posterior)
        return posterior

    def scene_viewpoints(self, scene: SceneRecord, view_indices: Sequence[int]) -> torch.Tensor:
        return self._tensor(scene.viewpoints[list(view_indices)])

    def query_viewpoints(self, azimuths: Sequence[float], radius: float | None = None) -> torch.Tensor:
        _, config = self._require()
        radius = radius if radius is not None else sum(config.data.camera_radius_range) / 2.0
        return self._tensor(np.stack([encode_viewpoint(a, radius).vector for a in azimuths]))

    def predict(
        self,
        scene: SceneRecord,
        observed: Sequence[int],
        viewpoints: torch.Tensor,
        mean_latent: bool = True,
        seed: int = 0,
    ) -> RenderedScene:
        model, _ = self._require()
        posterior = self.observe(scene, observed)
        generator = torch.Generator(device="cpu").manual_seed(seed)
        return predict_novel_view(model, posterior, viewpoints, mean_latent=mean_latent, generator=generator)

    def traverse(
        self,
        scene: SceneRecord,
        observed: Sequence[int],
        slot: int,
        dim: int,
        values: Sequence[float],
        viewpoints: torch.Tensor,
    ) -> list[RenderedScene]:
        model, _ = self._require()
        return latent_traversal(model, self.observe(scene, observed), slot, dim, values, viewpoints)

    @torch.no_grad()
    def sample_scenes(self, count: int, seed: int, num_slots: int | None = None) -> list[RenderedScene]:
        model, config = self._require()
        generator = torch.Generator(device="cpu").manual_seed(derive_seed(seed, "sample"))
        slots = num_slots or config.model.num_slots
        scenes = []
        for _ in range(count):
            azimuth = float(torch.rand(1, generator=generator)) * 2.0 * math.pi
            viewpoint = self.query_viewpoints([azimuth])[0]
            noise = torch.randn(slots, config.model.z_dims, generator=generator).to(device=self.device, dtype=self._dtype())
            scenes.append(generate_random_scene(model.transformer, model.decoder, viewpoint, noise))
        return scenes
