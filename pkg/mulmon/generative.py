"""
Viewpoint-conditioned generation and decoder-output post-processing.

Shape conventions (leading batch dimensions are optional everywhere):
    slots z, z_tilde      [..., K, D]
    viewpoint v           [..., J]
    image x               [..., C, H, W]
    rgb_means             [..., K, C, H, W]
    mask_logits           [..., K, 1, H, W]
The slot axis of decoder outputs is therefore always dim -4.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatchError
from .latent_state import init_prior, sample

SLOT_DIM = -4


def coordinate_grid(height: int, width: int, dtype=None, device=None) -> torch.Tensor:
    """Two channels spanning [-1, 1]: channel 0 varies along width, channel 1 along height."""
    rows = torch.linspace(-1.0, 1.0, height, dtype=dtype, device=device)
    cols = torch.linspace(-1.0, 1.0, width, dtype=dtype, device=device)
    grid_y, grid_x = torch.meshgrid(rows, cols, indexing="ij")
    return torch.stack([grid_x, grid_y])


class ViewTransformer(nn.Module):
    """f_theta1: per-slot MLP on [z_k, v]."""

    def __init__(self, z_dims: int, v_dims: int, hidden: int = 512):
        super().__init__()
        self.z_dims = z_dims
        self.v_dims = v_dims
        self.net = nn.Sequential(
            nn.Linear(z_dims + v_dims, hidden),
            nn.ReLU(),
            nn.Linear(hidden, z_dims),
        )

    def forward(self, z: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        if v.shape[-1] != self.v_dims:
            raise ShapeMismatchError(f"viewpoint has {v.shape[-1]} dims, model expects {self.v_dims}")
        if z.shape[-1] != self.z_dims:
            raise ShapeMismatchError(f"slots have {z.shape[-1]} dims, model expects {self.z_dims}")
        v_slots = v.unsqueeze(-2).expand(*z.shape[:-1], self.v_dims)
        return self.net(torch.cat([z, v_slots], dim=-1))


@dataclass(frozen=True)
class DecoderOutput:
    rgb_means: torch.Tensor
    mask_logits: torch.Tensor

    @property
    def num_slots(self) -> int:
        return self.rgb_means.shape[SLOT_DIM]

    def permute(self, perm: Sequence[int]) -> "DecoderOutput":
        order = torch.as_tensor(list(perm), device=self.rgb_means.device)
        return DecoderOutput(
            self.rgb_means.index_select(SLOT_DIM % self.rgb_means.dim(), order),
            self.mask_logits.index_select(SLOT_DIM % self.mask_logits.dim(), order),
        )

    def detach(self) -> "DecoderOutput":
        return DecoderOutput(self.rgb_means.detach(), self.mask_logits.detach())


class SpatialBroadcastDecoder(nn.Module):
    """g_theta2: broadcast each slot over the grid, append coordinates, then 3x3 convs."""

    def __init__(self, z_dims: int, image_size: int, channels: int = 32, layers: int = 4, out_channels: int = 3):
        super().__init__()
        self.z_dims = z_dims
        self.image_size = image_size
        self.out_channels = out_channels
        blocks: list[nn.Module] = []
        in_channels = z_dims + 2
        for _ in range(layers):
            blocks += [nn.Conv2d(in_channels, channels, kernel_size=3, padding=1), nn.ReLU()]
            in_channels = channels
        blocks.append(nn.Conv2d(in_channels, out_channels + 1, kernel_size=3, padding=1))
        self.net = nn.Sequential(*blocks)

    def forward(self, z_tilde: torch.Tensor, height: int | None = None, width: int | None = None) -> DecoderOutput:
        height = height or self.image_size
        width = width or self.image_size
        lead = z_tilde.shape[:-1]
        flat = z_tilde.reshape(-1, self.z_dims)
        grid = flat[:, :, None, None].expand(-1, -1, height, width)
        coords = coordinate_grid(height, width, dtype=flat.dtype, device=flat.device)
        coords = coords.unsqueeze(0).expand(flat.shape[0], -1, -1, -1)
        out = self.net(torch.cat([grid, coords], dim=1))
        out = out.reshape(*lead, self.out_channels + 1, height, width)
        return DecoderOutput(rgb_means=out[..., : self.out_channels, :, :], mask_logits=out[..., self.out_channels :, :, :])


def view_transform(z: torch.Tensor, v: torch.Tensor, transformer: ViewTransformer) -> torch.Tensor:
    return transformer(z, v)


def decode(z_tilde: torch.Tensor, decoder: SpatialBroadcastDecoder, height: int | None = None, width: int | None = None) -> DecoderOutput:
    return decoder(z_tilde, height, width)


def gaussian_log_density(x: torch.Tensor, mean: torch.Tensor, sigma2: float) -> torch.Tensor:
    """Elementwise log N(x; mean, sigma2)."""
    return -0.5 * ((x - mean) ** 2 / sigma2 + math.log(2.0 * math.pi * sigma2))


def component_log_likelihoods(x: torch.Tensor, out: DecoderOutput, sigma2: float) -> torch.Tensor:
    """log m_ik + log N(x_i; mu_ik, sigma2 I) per slot and pixel, shape [..., K, H, W]."""
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    if x.shape[-3:] != out.rgb_means.shape[-3:]:
        raise ShapeMismatchError(f"image {tuple(x.shape)} does not match decoder output {tuple(out.rgb_means.shape)}")
    log_masks = F.log_softmax(out.mask_logits, dim=SLOT_DIM).squeeze(-3)
    log_gauss = gaussian_log_density(x.unsqueeze(SLOT_DIM), out.rgb_means, sigma2).sum(dim=-3)
    return log_masks + log_gauss


def pixel_log_likelihood(x: torch.Tensor, out: DecoderOutput, sigma2: float) -> torch.Tensor:
    """Per-pixel mixture log-likelihood, shape [..., H, W]."""
    return torch.logsumexp(component_log_likelihoods(x, out, sigma2), dim=-3)


def mixture_log_likelihood(x: torch.Tensor, out: DecoderOutput, sigma2: float = 0.01) -> torch.Tensor:
    """log p(x | z, v), summed over pixels and channels; shape is the batch shape."""
    return pixel_log_likelihood(x, out, sigma2).sum(dim=(-2, -1))


def soft_masks(out: DecoderOutput) -> torch.Tensor:
    return F.softmax(out.mask_logits, dim=SLOT_DIM).squeeze(-3)


def compose_image(out: DecoderOutput) -> torch.Tensor:
    weights = F.softmax(out.mask_logits, dim=SLOT_DIM)
    return (weights * out.rgb_means).sum(dim=SLOT_DIM)


def segmentation(out: DecoderOutput) -> tuple[torch.Tensor, torch.Tensor]:
    # torch.argmax returns the first maximal index, so ties go to the lowest slot
    hard = out.mask_logits.squeeze(-3).argmax(dim=-3)
    return soft_masks(out), hard


def component_images(out: DecoderOutput) -> torch.Tensor:
    return torch.sigmoid(out.mask_logits) * out.rgb_means


@dataclass(frozen=True)
class RenderedScene:
    image: torch.Tensor  # [..., 3, H, W]
    soft_masks: torch.Tensor  # [..., K, H, W]
    hard_masks: torch.Tensor  # [..., H, W]
    component_images: torch.Tensor  # [..., K, 3, H, W]


def render(out: DecoderOutput) -> RenderedScene:
    soft, hard = segmentation(out)
    return RenderedScene(
        image=compose_image(out),
        soft_masks=soft,
        hard_masks=hard,
        component_images=component_images(out),
    )


def generate_random_scene(
    transformer: ViewTransformer,
    decoder: SpatialBroadcastDecoder,
    v: torch.Tensor,
    noise: torch.Tensor,
) -> RenderedScene:
    """Compose independently drawn N(0, I) slots (one row of ``noise`` per slot) at viewpoint ``v``."""
    prior = init_prior(noise.shape[-2], noise.shape[-1], noise.shape[:-2], dtype=noise.dtype, device=noise.device)
    z = sample(prior, noise)
    return render(decode(view_transform(z, v, transformer), decoder))
