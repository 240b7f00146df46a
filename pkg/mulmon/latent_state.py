"""
Slot-structured diagonal Gaussian posterior over K object latents.

Tensors carry arbitrary leading batch dimensions: ``mean`` and ``raw_scale`` are
``[..., K, D]``. The scale is ``softplus(raw_scale) + SCALE_FLOOR`` so refinement
updates can act on unconstrained parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeMismatchError
from .services.array_io import read_arrays, write_arrays

SCALE_FLOOR = 1e-5


def raw_scale_for(scale: float) -> float:
    """Inverse of the scale parametrization."""
    if not scale > SCALE_FLOOR:
        raise ValueError(f"scale must exceed {SCALE_FLOOR}, got {scale}")
    return math.log(math.expm1(scale - SCALE_FLOOR))


@dataclass(frozen=True)
class LatentSlots:
    mean: torch.Tensor
    raw_scale: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.raw_scale.shape:
            raise ShapeMismatchError(f"mean {tuple(self.mean.shape)} and raw_scale {tuple(self.raw_scale.shape)} differ")
        if self.mean.dim() < 2:
            raise ShapeMismatchError("slots need at least a [K, D] shape")

    @property
    def scale(self) -> torch.Tensor:
        return F.softplus(self.raw_scale) + SCALE_FLOOR

    @property
    def num_slots(self) -> int:
        return self.mean.shape[-2]

    @property
    def z_dims(self) -> int:
        return self.mean.shape[-1]

    @property
    def batch_shape(self) -> torch.Size:
        return self.mean.shape[:-2]

    def update(self, delta: torch.Tensor) -> "LatentSlots":
        """Additive refinement on (mean, raw_scale); ``delta`` is ``[..., K, 2D]``."""
        if delta.shape[-1] != 2 * self.z_dims or delta.shape[:-1] != self.mean.shape[:-1]:
            raise ShapeMismatchError(f"delta {tuple(delta.shape)} does not fit slots {tuple(self.mean.shape)}")
        d_mean, d_raw = delta.split(self.z_dims, dim=-1)
        return LatentSlots(self.mean + d_mean, self.raw_scale + d_raw)

    def detach(self) -> "LatentSlots":
        return LatentSlots(self.mean.detach(), self.raw_scale.detach())

    def requires_grad_(self) -> "LatentSlots":
        return LatentSlots(self.mean.detach().requires_grad_(True), self.raw_scale.detach().requires_grad_(True))

    def index(self, item) -> "LatentSlots":
        return LatentSlots(self.mean[item], self.raw_scale[item])

    def to(self, *args, **kwargs) -> "LatentSlots":
        return LatentSlots(self.mean.to(*args, **kwargs), self.raw_scale.to(*args, **kwargs))


def init_prior(
    num_slots: int,
    z_dims: int,
    batch_shape: Sequence[int] = (),
    dtype: torch.dtype | None = None,
    device: torch.device | str | None = None,
) -> LatentSlots:
    """Standard normal N(0, I) for every slot."""
    if num_slots < 1 or z_dims < 1:
        raise ValueError(f"need K >= 1 and D >= 1, got K={num_slots}, D={z_dims}")
    shape = (*batch_shape, num_slots, z_dims)
    mean = torch.zeros(shape, dtype=dtype, device=device)
    raw = torch.full(shape, raw_scale_for(1.0), dtype=mean.dtype, device=device)
    return LatentSlots(mean, raw)


def sample(slots: LatentSlots, noise: torch.Tensor) -> torch.Tensor:
    """Reparametrized draw ``z = mean + scale * noise``."""
    if noise.shape != slots.mean.shape:
        raise ShapeMismatchError(f"noise {tuple(noise.shape)} does not match slots {tuple(slots.mean.shape)}")
    return slots.mean + slots.scale * noise


def draw_noise(slots: LatentSlots, generator: torch.Generator | None = None) -> torch.Tensor:
    # draws follow the generator's device so one CPU generator drives any device
    device = generator.device if generator is not None else slots.mean.device
    noise = torch.randn(slots.mean.shape, generator=generator, dtype=slots.mean.dtype, device=device)
    return noise.to(slots.mean.device)


def kl_gaussian(q: LatentSlots, p: LatentSlots) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over slots and dims; shape is the batch shape."""
    if q.mean.shape != p.mean.shape:
        raise ShapeMismatchError(f"KL between slots of shape {tuple(q.mean.shape)} and {tuple(p.mean.shape)}")
    q_scale, p_scale = q.scale, p.scale
    var_ratio = (q_scale / p_scale) ** 2
    mahalanobis = ((q.mean - p.mean) / p_scale) ** 2
    kl = 0.5 * (var_ratio + mahalanobis - 1.0 - torch.log(var_ratio))
    return kl.sum(dim=(-2, -1))


def _validate_permutation(perm: Sequence[int], num_slots: int) -> list[int]:
    order = [int(i) for i in perm]
    if sorted(order) != list(range(num_slots)):
        raise ValueError(f"{order} is not a permutation of {num_slots} slots")
    return order


def permute_slots(slots: LatentSlots, perm: Sequence[int]) -> LatentSlots:
    order = torch.as_tensor(_validate_permutation(perm, slots.num_slots), device=slots.mean.device)
    return LatentSlots(slots.mean.index_select(-2, order), slots.raw_scale.index_select(-2, order))


def save_slots(slots: LatentSlots, path: str | Path) -> str:
    """Write slots as an array chunk; returns its sha256."""
    return write_arrays(
        path,
        {
            "mean": slots.mean.detach().cpu().numpy(),
            "raw_scale": slots.raw_scale.detach().cpu().numpy(),
        },
    )


def load_slots(path: str | Path, dtype: torch.dtype = torch.float32) -> LatentSlots:
    arrays = read_arrays(path)
    missing = {"mean", "raw_scale"} - set(arrays)
    if missing:
        raise ShapeMismatchError(f"slot file {path} lacks {sorted(missing)}")
    return LatentSlots(
        torch.from_numpy(np.array(arrays["mean"])).to(dtype),
        torch.from_numpy(np.array(arrays["raw_scale"])).to(dtype),
    )
