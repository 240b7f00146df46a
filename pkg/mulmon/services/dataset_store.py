"""
On-disk dataset directory: ``manifest.json`` plus one array chunk per scene.

Layout::

    <root>/manifest.json          DatasetManifest (JSON)
    <root>/scenes/<scene_id>.npz  images <f4 [T,3,H,W], viewpoints <f8 [T,J], masks <i4 [T,H,W]
    <root>/.write.lock            present while a writer is active

Readers never take the write lock; decoded scenes are shared through an LRU cache.
"""
from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np

from ..errors import DataError, DatasetFormatError
from ..models import SCHEMA_VERSION, DatasetManifest, SceneEntry
from ..scene_data import SceneRecord, Viewpoint, ViewObservation
from .array_io import read_arrays, write_arrays
from .cache import SceneCache

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".write.lock"


class DatasetStore:
    """
    Reader/writer for one dataset directory.

    Writers are exclusive (lock file created with O_EXCL); any number of readers
    may load scenes concurrently.
    """

    def __init__(self, root: str | Path, cache_size: int = 256):
        self.root = Path(root)
        self._cache: SceneCache[str, SceneRecord] = SceneCache(cache_size)
        self._manifest: DatasetManifest | None = None

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def _chunk_path(self, scene_id: str) -> Path:
        return self.root / "scenes" / f"{scene_id}.npz"

    def _acquire_lock(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        lock_path = self.root / LOCK_NAME
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise DataError(f"dataset {self.root} is locked by another writer ({lock_path})") from e
        with os.fdopen(fd, "w") as handle:
            handle.write(str(os.getpid()))
        return lock_path

    def write(self, scenes: dict[str, list[SceneRecord]], manifest: DatasetManifest) -> DatasetManifest:
        lock_path = self._acquire_lock()
        try:
            entries = []
            for split, records in scenes.items():
                for record in records:
                    self._check_record(record, manifest)
                    sha = write_arrays(
                        self._chunk_path(record.scene_id),
                        {"images": record.images, "viewpoints": record.viewpoints, "masks": record.masks},
                    )
                    entries.append(
                        SceneEntry(
                            scene_id=record.scene_id,
                            split=split,
                            chunk=f"scenes/{record.scene_id}.npz",
                            sha256=sha,
                            objects=record.objects,
                        )
                    )
            stored = manifest.model_copy(
                update={"scenes": entries, "splits": {split: len(records) for split, records in scenes.items()}}
            )
            tmp = self.manifest_path.with_suffix(".json.tmp")
            tmp.write_text(stored.model_dump_json(indent=2), encoding="utf-8")
            os.replace(tmp, self.manifest_path)
            logger.info("Wrote %s scenes to %s", len(entries), self.root)
        finally:
            lock_path.unlink(missing_ok=True)
        self._manifest = stored
        self._cache.clear()
        return stored

    @staticmethod
    def _check_record(record: SceneRecord, manifest: DatasetManifest) -> None:
        if len(record.views) != manifest.views_per_scene:
            raise DatasetFormatError(
                f"{len(record.views)} views, manifest expects {manifest.views_per_scene}", scene_id=record.scene_id
            )
        height, width = record.views[0].image.shape[-2:]
        if (height, width) != (manifest.height, manifest.width):
            raise DatasetFormatError(
                f"images are {height}x{width}, manifest says {manifest.height}x{manifest.width}",
                scene_id=record.scene_id,
            )

    def load_manifest(self) -> DatasetManifest:
        if self._manifest is not None:
            return self._manifest
        if not self.manifest_path.exists():
            raise DatasetFormatError(f"no {MANIFEST_NAME} in {self.root}")
        try:
            manifest = DatasetManifest.model_validate_json(self.manifest_path.read_text(encoding="utf-8"))
        except ValueError as e:
            raise DatasetFormatError(f"invalid manifest in {self.root}: {e}") from e
        if manifest.schema_version != SCHEMA_VERSION:
            raise DatasetFormatError(
                f"schema version {manifest.schema_version} is not supported (expected {SCHEMA_VERSION})"
            )
        self._manifest = manifest
        return manifest

    def _entry(self, scene_id: str) -> SceneEntry:
        for entry in self.load_manifest().scenes:
            if entry.scene_id == scene_id:
                return entry
        raise DatasetFormatError("not listed in the manifest", scene_id=scene_id)

    def _read_scene(self, scene_id: str) -> SceneRecord:
        manifest = self.load_manifest()
        entry = self._entry(scene_id)
        try:
            arrays = read_arrays(self.root / entry.chunk, expected_sha256=entry.sha256)
        except DatasetFormatError as e:
            raise DatasetFormatError(str(e), scene_id=scene_id) from e
        expected = {
            "images": (manifest.views_per_scene, 3, manifest.height, manifest.width),
            "viewpoints": (manifest.views_per_scene, manifest.viewpoint_dims),
            "masks": (manifest.views_per_scene, manifest.height, manifest.width),
        }
        for name, shape in expected.items():
            if name not in arrays:
                raise DatasetFormatError(f"chunk has no {name!r} array", scene_id=scene_id)
            if tuple(arrays[name].shape) != shape:
                raise DatasetFormatError(
                    f"{name} has shape {tuple(arrays[name].shape)}, manifest implies {shape}", scene_id=scene_id
                )
        views = [
            ViewObservation(
                image=arrays["images"][t],
                viewpoint=Viewpoint(arrays["viewpoints"][t].astype(np.float64)),
                gt_masks=arrays["masks"][t],
            )
            for t in range(manifest.views_per_scene)
        ]
        return SceneRecord(scene_id=scene_id, objects=list(entry.objects), views=views)

    def load_scene(self, scene_id: str) -> SceneRecord:
        return self._cache.get_or_load(scene_id, self._read_scene)

    def load_split(self, split: str) -> list[SceneRecord]:
        manifest = self.load_manifest()
        if split not in manifest.splits:
            raise DataError(f"split {split!r} not in dataset {self.root}; available: {sorted(manifest.splits)}")
        return [self.load_scene(scene_id) for scene_id in manifest.scene_ids(split)]

    def get_dataset_info(self) -> dict:
        manifest = self.load_manifest()
        return {**manifest.summary(), "root": str(self.root), "cached_scenes": len(self._cache)}
