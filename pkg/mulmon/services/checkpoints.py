"""
Checkpoint directory: ``ckpt-<step>.pt`` (torch state dicts plus training state)
and a ``ckpt-<step>.json`` sidecar listing every weight name with its shape.
"""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from threading import Lock
from typing import Any

import torch
from torch import nn

from ..config import ExperimentConfig
from ..errors import CheckpointError

logger = logging.getLogger(__name__)


def weight_manifest(model: nn.Module) -> dict[str, list[int]]:
    return {name: list(tensor.shape) for name, tensor in model.state_dict().items()}


class CheckpointManager:
    def __init__(self, directory: str | Path, keep: int = 3):
        self.directory = Path(directory)
        self.keep = keep
        self._lock = Lock()

    def path_for(self, step: int) -> Path:
        return self.directory / f"ckpt-{step:08d}.pt"

    def list_checkpoints(self) -> list[Path]:
        if not self.directory.exists():
            return []
        return sorted(self.directory.glob("ckpt-*.pt"))

    def latest(self) -> Path | None:
        checkpoints = self.list_checkpoints()
        return checkpoints[-1] if checkpoints else None

    def save(
        self,
        step: int,
        model: nn.Module,
        config: ExperimentConfig,
        optimizer: torch.optim.Optimizer | None = None,
        train_state: dict[str, Any] | None = None,
    ) -> Path:
        path = self.path_for(step)
        payload = {
            "step": step,
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "train_state": train_state or {},
            "config": config.model_dump(mode="json"),
        }
        sidecar = {"step": step, "weights": weight_manifest(model), "config": payload["config"]}
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".pt.tmp")
            torch.save(payload, tmp)
            os.replace(tmp, path)
            path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
            self._prune()
        logger.info("Saved checkpoint %s", path)
        return path

    def _prune(self) -> None:
        for stale in self.list_checkpoints()[: -self.keep]:
            stale.unlink(missing_ok=True)
            stale.with_suffix(".json").unlink(missing_ok=True)

    def resolve(self, path: str | Path | None) -> Path:
        """A checkpoint file, or the latest checkpoint inside a directory."""
        candidate = Path(path) if path is not None else self.directory
        if candidate.is_dir():
            latest = CheckpointManager(candidate).latest()
            if latest is None:
                raise CheckpointError(f"no checkpoints in {candidate}")
            return latest
        if not candidate.exists():
            raise CheckpointError(f"checkpoint not found: {candidate}")
        return candidate


def read_checkpoint(path: str | Path) -> dict[str, Any]:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    except Exception as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    missing = {"step", "model", "config"} - set(payload if isinstance(payload, dict) else {})
    if missing:
        raise CheckpointError(f"checkpoint {path} lacks {sorted(missing)}")
    return payload


def checkpoint_config(payload: dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(payload["config"])
    except ValueError as e:
        raise CheckpointError(f"checkpoint config is invalid: {e}") from e


def restore_model(payload: dict[str, Any], model: nn.Module, optimizer: torch.optim.Optimizer | None = None) -> int:
    try:
        model.load_state_dict(payload["model"])
        if optimizer is not None and payload.get("optimizer") is not None:
            optimizer.load_state_dict(payload["optimizer"])
    except (RuntimeError, KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint weights do not fit the model: {e}") from e
    return int(payload["step"])
