"""
Trainable parameters: view transformer (theta1), generator (theta2) and
refinement network (Phi), bundled in one module for checkpointing.
"""
from __future__ import annotations

import logging

import torch
from torch import nn

from .config import ModelConfig
from .generative import DecoderOutput, SpatialBroadcastDecoder, ViewTransformer
from .latent_state import LatentSlots

logger = logging.getLogger(__name__)

AUX_CHANNELS = 17

Hidden = tuple[torch.Tensor, torch.Tensor]


class RefinementNetwork(nn.Module):
    """
    f_Phi: conv encoder over the 17-channel auxiliary stack, an MLP to 128 features,
    concatenation with the per-slot vector inputs, an LSTM cell and a linear
    head producing the additive update for (mean, raw_scale).
    """

    def __init__(
        self,
        z_dims: int,
        v_dims: int,
        image_size: int,
        channels: tuple[int, ...] = (32, 32, 64, 64),
        hidden: int = 256,
        features: int = 128,
        lstm_hidden: int = 128,
        pool: int | None = None,
    ):
        super().__init__()
        self.z_dims = z_dims
        self.v_dims = v_dims
        self.lstm_hidden = lstm_hidden
        blocks: list[nn.Module] = []
        in_channels = AUX_CHANNELS
        for out_channels in channels:
            blocks += [nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1), nn.ReLU()]
            in_channels = out_channels
        grid = image_size
        if pool is not None and pool < image_size:
            blocks.append(nn.AdaptiveAvgPool2d(pool))
            grid = pool
        blocks.append(nn.Flatten())
        self.encoder = nn.Sequential(*blocks)
        self.mlp = nn.Sequential(
            nn.Linear(in_channels * grid * grid, hidden),
            nn.ReLU(),
            nn.Linear(hidden, features),
        )
        self.vector_dims = 4 * z_dims + v_dims
        self.cell = nn.LSTMCell(features + self.vector_dims, lstm_hidden)
        self.head = nn.Linear(lstm_hidden, 2 * z_dims)

    def forward(self, spatial: torch.Tensor, vector: torch.Tensor, hidden: Hidden) -> tuple[torch.Tensor, Hidden]:
        features = self.mlp(self.encoder(spatial))
        h, c = self.cell(torch.cat([features, vector], dim=-1), hidden)
        return self.head(h), (h, c)

    def init_hidden(self, rows: int, dtype=None, device=None) -> Hidden:
        zeros = torch.zeros(rows, self.lstm_hidden, dtype=dtype, device=device)
        return zeros, zeros.clone()


class MulMONNetwork(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.transformer = ViewTransformer(config.z_dims, config.v_dims, config.transform_hidden)
        self.decoder = SpatialBroadcastDecoder(
            config.z_dims, config.image_size, config.decoder_channels, config.decoder_layers
        )
        self.refinement = RefinementNetwork(
            config.z_dims,
            config.v_dims,
            config.image_size,
            channels=tuple(config.refine_channels),
            hidden=config.refine_hidden,
            features=config.refine_features,
            lstm_hidden=config.lstm_hidden,
            pool=config.refine_pool,
        )

    @property
    def num_slots(self) -> int:
        return self.config.num_slots

    @property
    def z_dims(self) -> int:
        return self.config.z_dims

    @property
    def sigma2(self) -> float:
        return self.config.sigma2

    def render_latents(self, z: torch.Tensor, v: torch.Tensor, height: int | None = None, width: int | None = None) -> DecoderOutput:
        return self.decoder(self.transformer(z, v), height, width)

    def init_hidden(self, slots: LatentSlots) -> Hidden:
        rows = slots.mean[..., 0].numel()
        return self.refinement.init_hidden(rows, dtype=slots.mean.dtype, device=slots.mean.device)

    @torch.no_grad()
    def zero_refinement_head(self) -> None:
        self.refinement.head.weight.zero_()
        self.refinement.head.bias.zero_()

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "view_transformer": list(self.transformer.parameters()),
            "decoder": list(self.decoder.parameters()),
            "refinement": list(self.refinement.parameters()),
        }


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> MulMONNetwork:
    """Construct a network with initial weights drawn from ``seed`` only."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MulMONNetwork(config)
    model = model.to(dtype)
    logger.info(
        "Built model with %s parameters (K=%s, D=%s, image %s)",
        sum(p.numel() for p in model.parameters()),
        config.num_slots,
        config.z_dims,
        config.image_size,
    )
    return model
