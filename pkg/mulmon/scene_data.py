"""
Procedural multi-view multi-object scenes.

Objects are camera-facing sprites standing on a ground disc. A view is fixed by
azimuth and camera distance; object positions are rotated into the camera frame,
projected with a fixed elevation and a perspective factor, and composited far to
near (painter's algorithm), so occlusions change with azimuth.
"""
from __future__ import annotations

import colorsys
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import SceneGenConfig
from .errors import GenerationError
from .models import FACTOR_NAMES, DatasetManifest, ObjectSpec

logger = logging.getLogger(__name__)

VIEWPOINT_DIMS = 3


@dataclass(frozen=True)
class Viewpoint:
    vector: np.ndarray

    @property
    def azimuth(self) -> float:
        return math.atan2(float(self.vector[1]), float(self.vector[0]))

    @property
    def radius(self) -> float:
        return float(self.vector[2])


def encode_viewpoint(azimuth: float, radius: float) -> Viewpoint:
    if not radius > 0:
        raise ValueError(f"camera radius must be positive, got {radius}")
    return Viewpoint(np.array([math.cos(azimuth), math.sin(azimuth), radius], dtype=np.float64))


@dataclass(frozen=True)
class ViewObservation:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    viewpoint: Viewpoint
    gt_masks: np.ndarray | None = None  # [H, W] int32, 0 is the background


@dataclass(eq=False)
class SceneRecord:
    scene_id: str
    objects: list[ObjectSpec]
    views: list[ViewObservation] = field(default_factory=list)

    @property
    def num_objects(self) -> int:
        return len(self.objects) - 1

    @property
    def factors(self) -> np.ndarray:
        return np.array([obj.factors() for obj in self.objects], dtype=np.float64)

    @property
    def images(self) -> np.ndarray:
        return np.stack([view.image for view in self.views])

    @property
    def viewpoints(self) -> np.ndarray:
        return np.stack([view.viewpoint.vector for view in self.views])

    @property
    def masks(self) -> np.ndarray:
        return np.stack([view.gt_masks for view in self.views])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SceneRecord):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.objects == other.objects
            and len(self.views) == len(other.views)
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.viewpoints, other.viewpoints)
            and np.array_equal(self.masks, other.masks)
        )


def scene_seed(root_seed: int, split: str, index: int) -> int:
    sequence = np.random.SeedSequence(entropy=root_seed, spawn_key=(zlib.crc32(split.encode("utf-8")), index))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def _random_color(rng: np.random.Generator) -> tuple[float, float, float]:
    hue = rng.uniform(0.0, 1.0)
    saturation = rng.uniform(0.55, 0.9)
    value = rng.uniform(0.6, 0.95)
    return tuple(float(round(c, 6)) for c in colorsys.hsv_to_rgb(hue, saturation, value))


def _place_objects(config: SceneGenConfig, shapes: Sequence[str], rng: np.random.Generator) -> list[ObjectSpec]:
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    depth_ranks = rng.permutation(count) + 1
    placed: list[ObjectSpec] = []
    for index in range(count):
        size = float(rng.uniform(*config.object_size_range))
        for _ in range(config.placement_retries):
            reach = config.scene_radius - size
            if reach <= 0:
                break
            angle = rng.uniform(0.0, 2.0 * math.pi)
            distance = reach * math.sqrt(rng.uniform(0.0, 1.0))
            position = (distance * math.cos(angle), distance * math.sin(angle))
            if all(
                math.dist(position, other.position) > size + other.size + 0.05
                for other in placed
            ):
                break
        else:
            raise GenerationError(
                f"could not place {count} objects on a disc of radius {config.scene_radius} "
                f"after {config.placement_retries} retries"
            )
        if reach <= 0:
            raise GenerationError(f"object size {size:.3f} does not fit the scene radius {config.scene_radius}")
        placed.append(
            ObjectSpec(
                shape=str(rng.choice(list(shapes))),
                color=_random_color(rng),
                size=round(size, 6),
                position=(round(position[0], 6), round(position[1], 6)),
                depth_rank=int(depth_ranks[index]),
                metal=bool(rng.uniform() < config.metal_probability),
            )
        )
    return placed


def _sample_viewpoints(config: SceneGenConfig, rng: np.random.Generator) -> list[Viewpoint]:
    count = config.views_per_scene
    if config.azimuth_sampling == "even":
        offset = rng.uniform(0.0, 2.0 * math.pi)
        azimuths = [offset + 2.0 * math.pi * i / count for i in range(count)]
    else:
        azimuths = list(rng.uniform(0.0, 2.0 * math.pi, size=count))
    radii = rng.uniform(*config.camera_radius_range, size=count)
    return [encode_viewpoint(float(a) % (2.0 * math.pi), float(r)) for a, r in zip(azimuths, radii)]


def _sprite_mask(shape: str, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # dx, dy are pixel offsets in units of the sprite radius; dy grows downwards
    if shape == "circle":
        return dx**2 + dy**2 <= 1.0
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85
    if shape == "triangle":
        return (dy >= -1.0) & (dy <= 0.8) & (np.abs(dx) <= 0.95 * (dy + 1.0) / 1.8)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.0
    raise ValueError(f"unknown sprite shape {shape!r}")


def render_view(objects: Sequence[ObjectSpec], viewpoint: Viewpoint, config: SceneGenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Render one view; returns (image [3, H, W] float32, masks [H, W] int32)."""
    size = config.image_size
    cos_a, sin_a, radius = (float(c) for c in viewpoint.vector)
    reference = sum(config.camera_radius_range) / 2.0
    extent = 1.05 * config.scene_radius * reference / (config.camera_radius_range[0] - config.scene_radius)
    pixels_per_unit = size / (2.0 * extent)
    horizon = 0.35 * size
    sin_e, cos_e = math.sin(config.camera_elevation), math.cos(config.camera_elevation)

    rows, cols = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    background = objects[0]
    image = np.empty((size, size, 3), dtype=np.float64)
    image[:] = background.color
    image[rows >= horizon] *= 0.85
    masks = np.zeros((size, size), dtype=np.int32)

    projected = []
    for index, obj in enumerate(objects[1:], start=1):
        x, y = obj.position
        depth = x * cos_a + y * sin_a
        lateral = -x * sin_a + y * cos_a
        perspective = reference / (radius - depth)
        scale = perspective * pixels_per_unit
        center_col = size / 2.0 + lateral * scale
        center_row = size / 2.0 + depth * sin_e * scale - obj.size * cos_e * scale
        projected.append((depth, obj.depth_rank, index, obj, center_row, center_col, obj.size * scale))

    # far to near; depth_rank breaks exact depth ties
    for _, _, index, obj, center_row, center_col, radius_px in sorted(projected, key=lambda item: (item[0], item[1])):
        dx = (cols - center_col) / radius_px
        dy = (rows - center_row) / radius_px
        inside = _sprite_mask(obj.shape, dx, dy)
        if not inside.any():
            continue
        shade = 1.0 - 0.2 * np.clip((dy + 1.0) / 2.0, 0.0, 1.0)
        color = np.asarray(obj.color)[None, None, :] * shade[..., None]
        if obj.metal:
            highlight = 0.6 * np.exp(-((dx + 0.35) ** 2 + (dy + 0.35) ** 2) / 0.08)
            color = color + highlight[..., None]
        image[inside] = np.clip(color[inside], 0.0, 1.0)
        masks[inside] = index

    return np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32), masks


def generate_scene(config: SceneGenConfig, seed: int, scene_id: str | None = None, shapes: Sequence[str] | None = None) -> SceneRecord:
    rng = np.random.default_rng(seed)
    pool = list(shapes) if shapes is not None else ["circle", "square", "triangle"]
    gray = rng.uniform(0.35, 0.6)
    tint = rng.uniform(-0.05, 0.05, size=3)
    background = ObjectSpec(
        shape="background",
        color=tuple(float(round(c, 6)) for c in np.clip(gray + tint, 0.0, 1.0)),
        size=1.0,
        depth_rank=0,
    )
    objects = [background, *_place_objects(config, pool, rng)]
    views = []
    for viewpoint in _sample_viewpoints(config, rng):
        image, masks = render_view(objects, viewpoint, config)
        views.append(ViewObservation(image=image, viewpoint=viewpoint, gt_masks=masks))
    return SceneRecord(scene_id=scene_id or f"scene-{seed}", objects=objects, views=views)


def _generate_one(args: tuple[SceneGenConfig, int, str, list[str]]) -> SceneRecord:
    config, seed, scene_id, shapes = args
    return generate_scene(config, seed, scene_id=scene_id, shapes=shapes)


def generate_split(config: SceneGenConfig, split: str) -> list[SceneRecord]:
    if split not in config.splits:
        raise GenerationError(f"unknown split {split!r}")
    split_config = config.splits[split]
    jobs = [
        (config, scene_seed(config.rng_seed, split, index), f"{split}-{index:05d}", list(split_config.shapes))
        for index in range(split_config.num_scenes)
    ]
    logger.info("Generating %s scenes for split %s with %s worker(s)", len(jobs), split, config.workers)
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(_generate_one, jobs, chunksize=8))
    return [_generate_one(job) for job in jobs]


def generate_dataset(config: SceneGenConfig) -> tuple[dict[str, list[SceneRecord]], DatasetManifest]:
    scenes = {split: generate_split(config, split) for split in config.splits}
    manifest = DatasetManifest(
        name=config.name,
        height=config.image_size,
        width=config.image_size,
        viewpoint_dims=VIEWPOINT_DIMS,
        views_per_scene=config.views_per_scene,
        rng_seed=config.rng_seed,
        splits={split: len(records) for split, records in scenes.items()},
        factor_names=list(FACTOR_NAMES),
        generation=config,
    )
    return scenes, manifest


def save_dataset(scenes: dict[str, list[SceneRecord]], manifest: DatasetManifest, path: str | Path) -> DatasetManifest:
    from .services.dataset_store import DatasetStore

    return DatasetStore(path).write(scenes, manifest)


def load_dataset(path: str | Path) -> tuple[dict[str, list[SceneRecord]], DatasetManifest]:
    from .services.dataset_store import DatasetStore

    store = DatasetStore(path)
    manifest = store.load_manifest()
    scenes = {split: [store.load_scene(scene_id) for scene_id in manifest.scene_ids(split)] for split in manifest.splits}
    return scenes, manifest


def regenerate(manifest: DatasetManifest) -> dict[str, list[SceneRecord]]:
    """Rebuild every split from the generation config recorded in a manifest."""
    return {split: generate_split(manifest.generation, split) for split in manifest.generation.splits}
