"""
Training objective and loop.

Each mini-batch draws one random split of the scene views into an observed set and
a query set. The observed views are absorbed by the recursive inference; the final
posterior then has to explain the query views at their viewpoints.

    total = observed_nll + query_nll + alpha_ig * ig_term
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from tqdm import tqdm

from .config import ExperimentConfig, TrainConfig, derive_seed
from .errors import NumericError
from .generative import mixture_log_likelihood
from .inference import observe_sequence
from .latent_state import LatentSlots, draw_noise, kl_gaussian, sample
from .logs import MetricsLog
from .models import LossRecord
from .network import MulMONNetwork, build_model
from .scene_data import SceneRecord
from .services.checkpoints import CheckpointManager, read_checkpoint, restore_model

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ViewPartition:
    observed: tuple[int, ...]
    query: tuple[int, ...]

    def __post_init__(self):
        if set(self.observed) & set(self.query):
            raise ValueError("observed and query views overlap")
        if not self.observed:
            raise ValueError("at least one observed view is required")


def partition_views(
    views: Sequence | int,
    generator: torch.Generator | None = None,
    max_observed: int = 5,
) -> ViewPartition:
    """n ~ U{1..min(max_observed, T-1)} observed views, in random order; the rest are queries."""
    total = views if isinstance(views, int) else len(views)
    if total < 2:
        raise ValueError(f"partitioning needs at least 2 views, got {total}")
    upper = min(max_observed, total - 1)
    count = int(torch.randint(1, upper + 1, (1,), generator=generator).item())
    order = torch.randperm(total, generator=generator).tolist()
    return ViewPartition(observed=tuple(order[:count]), query=tuple(sorted(order[count:])))


def query_loss(
    posterior: LatentSlots,
    images: torch.Tensor,
    viewpoints: torch.Tensor,
    model: MulMONNetwork,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """
    Mean negative log-likelihood of the query views ``images [..., Q, 3, H, W]`` at
    ``viewpoints [..., Q, J]``, with a fresh latent draw per query.
    """
    num_queries = images.shape[-4]
    if num_queries == 0:
        logger.warning("Empty query set; query loss is zero")
        return images.new_zeros(posterior.batch_shape)
    total = images.new_zeros(posterior.batch_shape)
    for q in range(num_queries):
        z = sample(posterior, draw_noise(posterior, generator))
        out = model.render_latents(z, viewpoints[..., q, :])
        total = total - mixture_log_likelihood(images[..., q, :, :, :], out, model.sigma2)
    return total / num_queries


def information_gain(posterior: LatentSlots, prior: LatentSlots) -> torch.Tensor:
    """KL between consecutive posteriors."""
    return kl_gaussian(posterior, prior)


def lr_schedule(step: int, initial_lr: float = 3e-4, decay_steps: float = 6e5) -> float:
    """max(0.1 eta0 + 0.9 eta0 (1 - s / decay), 0.1 eta0)."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    return max(initial_lr * (1.0 - 0.9 * step / decay_steps), initial_lr / 10.0)


@dataclass
class LossBreakdown:
    observed_nll: torch.Tensor
    query_nll: torch.Tensor
    ig_term: torch.Tensor
    alpha_ig: float
    num_observed: int
    num_query: int

    @property
    def total(self) -> torch.Tensor:
        return self.observed_nll + self.query_nll + self.alpha_ig * self.ig_term

    def to_record(self, step: int, learning_rate: float, seconds: float = 0.0) -> LossRecord:
        return LossRecord(
            step=step,
            total=float(self.total.detach()),
            observed_nll=float(self.observed_nll.detach()),
            query_nll=float(self.query_nll.detach()),
            ig_term=float(self.ig_term.detach()),
            alpha_ig=self.alpha_ig,
            learning_rate=learning_rate,
            num_observed=self.num_observed,
            num_query=self.num_query,
            seconds=seconds,
        )


def elbo_batch(
    images: torch.Tensor,
    viewpoints: torch.Tensor,
    model: MulMONNetwork,
    config: TrainConfig,
    generator: torch.Generator | None = None,
    partition: ViewPartition | None = None,
    scene_ids: Sequence[str] = (),
) -> LossBreakdown:
    """
    Negative ELBO for a batch of scenes ``images [B, T, 3, H, W]``,
    ``viewpoints [B, T, J]``; each term is averaged over the batch.
    """
    if images.shape[-4] < 2 and partition is None:
        raise ValueError("each scene needs at least 2 views")
    if partition is None:
        partition = partition_views(images.shape[-4], generator, config.max_observed)
    views = [(images[..., t, :, :, :], viewpoints[..., t, :]) for t in partition.observed]
    try:
        sequence = observe_sequence(
            views,
            model,
            config.num_iterations,
            train_mode=True,
            generator=generator,
            kl_weight=config.alpha_ig,
        )
    except NumericError as e:
        raise NumericError(
            e.reason,
            scene_id=",".join(scene_ids) or None,
            view_index=partition.observed[e.view_index] if e.view_index is not None else None,
            iteration=e.iteration,
        ) from e
    observed_nll = torch.stack([result.nll for result in sequence.views]).mean(dim=0)
    ig_term = torch.stack([result.kl for result in sequence.views]).mean(dim=0)

    # noise is drawn per query in ascending view order
    query_index = torch.as_tensor(sorted(partition.query), dtype=torch.long, device=images.device)
    query_nll = query_loss(
        sequence.posterior,
        images.index_select(-4 % images.dim(), query_index),
        viewpoints.index_select(-2 % viewpoints.dim(), query_index),
        model,
        generator,
    )
    breakdown = LossBreakdown(
        observed_nll=observed_nll.mean(),
        query_nll=query_nll.mean(),
        ig_term=ig_term.mean(),
        alpha_ig=config.alpha_ig,
        num_observed=len(partition.observed),
        num_query=len(partition.query),
    )
    if not torch.isfinite(breakdown.total):
        raise NumericError("non-finite training loss", scene_id=",".join(scene_ids) or None)
    return breakdown


def elbo_single_scene(
    images: torch.Tensor,
    viewpoints: torch.Tensor,
    model: MulMONNetwork,
    config: TrainConfig,
    generator: torch.Generator | None = None,
    partition: ViewPartition | None = None,
    scene_id: str | None = None,
) -> LossBreakdown:
    """Negative ELBO of one scene, ``images [T, 3, H, W]`` and ``viewpoints [T, J]``."""
    return elbo_batch(
        images.unsqueeze(0),
        viewpoints.unsqueeze(0),
        model,
        config,
        generator=generator,
        partition=partition,
        scene_ids=[scene_id] if scene_id else (),
    )


class BatchSampler:
    """Epoch-wise shuffled scene indices; reshuffles when an epoch runs out."""

    def __init__(self, num_scenes: int, batch_size: int, seed: int):
        if num_scenes < 1:
            raise ValueError("cannot sample batches from an empty dataset")
        self.num_scenes = num_scenes
        self.batch_size = min(batch_size, num_scenes)
        self._rng = np.random.default_rng(seed)
        self._order: list[int] = []
        self._cursor = 0
        self.epoch = 0

    def _reshuffle(self) -> None:
        self._order = self._rng.permutation(self.num_scenes).tolist()
        self._cursor = 0
        self.epoch += 1

    def next_batch(self) -> list[int]:
        if self._cursor + self.batch_size > len(self._order):
            self._reshuffle()
        batch = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return batch

    def state_dict(self) -> dict:
        return {
            "rng": self._rng.bit_generator.state,
            "order": list(self._order),
            "cursor": self._cursor,
            "epoch": self.epoch,
        }

    def load_state_dict(self, state: dict) -> None:
        self._rng.bit_generator.state = state["rng"]
        self._order = list(state["order"])
        self._cursor = int(state["cursor"])
        self.epoch = int(state["epoch"])


def stack_scenes(scenes: Sequence[SceneRecord], dtype: torch.dtype, device: torch.device | str = "cpu") -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([scene.images for scene in scenes])).to(device=device, dtype=dtype)
    viewpoints = torch.from_numpy(np.stack([scene.viewpoints for scene in scenes])).to(device=device, dtype=dtype)
    return images, viewpoints


class Trainer:
    """
    Adam over mini-batches of scenes with the stepwise learning-rate schedule,
    per-step loss records and periodic, resumable checkpoints.
    """

    def __init__(
        self,
        scenes: Sequence[SceneRecord],
        config: ExperimentConfig,
        output_dir: str | Path,
        device: str = "cpu",
        dtype: torch.dtype = torch.float32,
        model: MulMONNetwork | None = None,
    ):
        self.scenes = list(scenes)
        self.config = config
        self.output_dir = Path(output_dir)
        self.device = device
        self.dtype = dtype
        self.model = (model or build_model(config.model, derive_seed(config.seed, "model"), dtype)).to(device)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.train.initial_lr)
        self.generator = torch.Generator(device="cpu").manual_seed(derive_seed(config.seed, "train"))
        self.sampler = BatchSampler(len(self.scenes), config.train.batch_size, derive_seed(config.seed, "batches"))
        self.checkpoints = CheckpointManager(self.output_dir / "checkpoints", keep=config.train.keep_checkpoints)
        self.metrics = MetricsLog(self.output_dir / "metrics.jsonl")
        self.step = 0

    def train_state(self) -> dict:
        return {"generator": self.generator.get_state(), "sampler": self.sampler.state_dict()}

    def save_checkpoint(self) -> Path:
        return self.checkpoints.save(self.step, self.model, self.config, self.optimizer, self.train_state())

    def resume(self, path: str | Path) -> int:
        payload = read_checkpoint(self.checkpoints.resolve(path))
        self.step = restore_model(payload, self.model, self.optimizer)
        state = payload.get("train_state", {})
        if "generator" in state:
            self.generator.set_state(state["generator"])
        if "sampler" in state:
            self.sampler.load_state_dict(state["sampler"])
        self.metrics.truncate_after(self.step)
        logger.info("Resumed from %s at step %s", path, self.step)
        return self.step

    def train_step(self) -> LossRecord:
        started = time.perf_counter()
        indices = self.sampler.next_batch()
        batch = [self.scenes[i] for i in indices]
        images, viewpoints = stack_scenes(batch, self.dtype, self.device)
        learning_rate = lr_schedule(self.step, self.config.train.initial_lr, self.config.train.lr_decay_steps)
        for group in self.optimizer.param_groups:
            group["lr"] = learning_rate

        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        breakdown = elbo_batch(
            images,
            viewpoints,
            self.model,
            self.config.train,
            generator=self.generator,
            scene_ids=[scene.scene_id for scene in batch],
        )
        breakdown.total.backward()
        self.optimizer.step()
        self.step += 1
        return breakdown.to_record(self.step, learning_rate, time.perf_counter() - started)

    def fit(self, total_steps: int | None = None, progress: bool = True) -> list[LossRecord]:
        total_steps = total_steps or self.config.train.total_steps
        records = []
        logger.info("Training from step %s to %s on %s scenes", self.step, total_steps, len(self.scenes))
        with tqdm(total=total_steps, initial=self.step, disable=not progress, desc="train") as bar:
            while self.step < total_steps:
                record = self.train_step()
                records.append(record)
                if record.step % self.config.train.log_every == 0:
                    self.metrics.append(record)
                if record.step % self.config.train.checkpoint_every == 0:
                    self.save_checkpoint()
                bar.set_postfix(loss=f"{record.total:.1f}")
                bar.update(1)
        if self.checkpoints.latest() != self.checkpoints.path_for(self.step):
            self.save_checkpoint()
        return records


def train(
    scenes: Sequence[SceneRecord],
    config: ExperimentConfig,
    output_dir: str | Path,
    resume: str | Path | None = None,
    device: str = "cpu",
    progress: bool = True,
) -> Trainer:
    trainer = Trainer(scenes, config, output_dir, device=device)
    if resume is not None:
        trainer.resume(resume)
    trainer.fit(progress=progress)
    return trainer
