"""
Iterative amortized inference.

Within a view, the posterior is refined L times by the refinement network
(additive updates on mean and raw scale). Across views, each posterior becomes the
prior of the next view, so a scene is absorbed online with constant state.

Auxiliary spatial channels, per slot (17 total):
    0-2   image
    3-5   slot rgb means
    6-8   d loss / d rgb means            (layer-normalized)
    9     soft mask
    10    mask logits
    11    d loss / d mask                 (layer-normalized)
    12    pixel mixture log-likelihood    (layer-normalized)
    13    leave-one-out log-likelihood    (layer-normalized, zero when K = 1)
    14-15 coordinates in [-1, 1]
    16    squared error summed over colour channels
Vector inputs are [mean, raw_scale, d loss / d mean, d loss / d raw_scale, v], 4D + J values.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import MissingGradientError, NumericError, ShapeMismatchError
from .generative import (
    SLOT_DIM,
    DecoderOutput,
    component_log_likelihoods,
    coordinate_grid,
    mixture_log_likelihood,
)
from .latent_state import LatentSlots, draw_noise, init_prior, kl_gaussian, sample
from .network import Hidden, MulMONNetwork, RefinementNetwork

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AuxGradients:
    rgb_means: torch.Tensor  # [..., K, C, H, W]
    masks: torch.Tensor  # [..., K, H, W]
    mean: torch.Tensor  # [..., K, D]
    raw_scale: torch.Tensor  # [..., K, D]


@dataclass(frozen=True)
class AuxiliaryInputs:
    spatial: torch.Tensor  # [..., K, 17, H, W]
    vector: torch.Tensor  # [..., K, 4D + J]


@dataclass
class InnerLoopTrace:
    posteriors: list[LatentSlots] = field(default_factory=list)
    losses: list[torch.Tensor] = field(default_factory=list)
    outputs: list[DecoderOutput] = field(default_factory=list)


@dataclass
class InnerLoopResult:
    posterior: LatentSlots
    trace: InnerLoopTrace
    hidden: Hidden
    nll: torch.Tensor  # weighted over iterations, per scene
    kl: torch.Tensor  # weighted over iterations, per scene
    loss: torch.Tensor


@dataclass
class SequenceResult:
    posterior: LatentSlots
    hidden: Hidden
    views: list[InnerLoopResult]


def inner_loop_weights(num_iterations: int) -> tuple[Fraction, ...]:
    """(2l + 2) / (L^2 + L) for l = 0..L-1; sums to exactly 1."""
    if num_iterations < 1:
        raise ValueError(f"need at least one inner-loop iteration, got {num_iterations}")
    denominator = num_iterations**2 + num_iterations
    return tuple(Fraction(2 * l + 2, denominator) for l in range(num_iterations))


def _layer_norm(tensor: torch.Tensor, dims: int) -> torch.Tensor:
    return F.layer_norm(tensor, tensor.shape[-dims:])


def loss_gradients(
    x: torch.Tensor,
    out: DecoderOutput,
    slots: LatentSlots,
    loss: torch.Tensor,
    sigma2: float,
    retain_graph: bool,
) -> AuxGradients:
    """
    Gradients fed to the refinement network. Mask and mean gradients of the
    negative log-likelihood are closed form; posterior gradients come from autograd
    without building a second-order graph. All results are detached.
    """
    grad_mean, grad_raw = torch.autograd.grad(
        loss.sum(), [slots.mean, slots.raw_scale], retain_graph=retain_graph
    )
    with torch.no_grad():
        log_comp = component_log_likelihoods(x, out.detach(), sigma2)
        log_mix = torch.logsumexp(log_comp, dim=-3, keepdim=True)
        responsibilities = torch.exp(log_comp - log_mix)
        diff = x.unsqueeze(SLOT_DIM) - out.rgb_means.detach()
        d_means = -responsibilities.unsqueeze(-3) * diff / sigma2
        log_masks = F.log_softmax(out.mask_logits.detach(), dim=SLOT_DIM).squeeze(-3)
        d_masks = -torch.exp(log_comp - log_masks - log_mix)
    return AuxGradients(rgb_means=d_means, masks=d_masks, mean=grad_mean.detach(), raw_scale=grad_raw.detach())


def _leave_one_out(log_comp: torch.Tensor, log_masks: torch.Tensor) -> torch.Tensor:
    num_slots = log_comp.shape[-3]
    if num_slots == 1:
        return torch.zeros_like(log_comp)
    excluded = torch.eye(num_slots, dtype=torch.bool, device=log_comp.device)[:, :, None, None]
    comp = log_comp.unsqueeze(-4).masked_fill(excluded, float("-inf"))
    masks = log_masks.unsqueeze(-4).masked_fill(excluded, float("-inf"))
    return torch.logsumexp(comp, dim=-3) - torch.logsumexp(masks, dim=-3)


def auxiliary_inputs(
    x: torch.Tensor,
    v: torch.Tensor,
    slots: LatentSlots,
    out: DecoderOutput,
    grads: AuxGradients | None,
    sigma2: float,
) -> AuxiliaryInputs:
    if grads is None:
        raise MissingGradientError("auxiliary inputs need the loss gradients of the current iteration")
    num_slots = out.num_slots
    height, width = x.shape[-2:]
    per_slot = lambda t: t.unsqueeze(SLOT_DIM).expand(*t.shape[:-3], num_slots, *t.shape[-3:])  # noqa: E731

    log_comp = component_log_likelihoods(x, out, sigma2)
    log_masks = F.log_softmax(out.mask_logits, dim=SLOT_DIM).squeeze(-3)
    pixel_ll = torch.logsumexp(log_comp, dim=-3, keepdim=True)
    coords = coordinate_grid(height, width, dtype=x.dtype, device=x.device)

    spatial = torch.cat(
        [
            per_slot(x),
            out.rgb_means,
            _layer_norm(grads.rgb_means, 3),
            torch.exp(log_masks).unsqueeze(-3),
            out.mask_logits,
            _layer_norm(grads.masks, 2).unsqueeze(-3),
            per_slot(_layer_norm(pixel_ll, 2)),
            _layer_norm(_leave_one_out(log_comp, log_masks), 2).unsqueeze(-3),
            coords.expand(*out.mask_logits.shape[:-3], 2, height, width),
            ((x.unsqueeze(SLOT_DIM) - out.rgb_means) ** 2).sum(dim=-3, keepdim=True),
        ],
        dim=-3,
    )
    vector = torch.cat(
        [
            slots.mean,
            slots.raw_scale,
            _layer_norm(grads.mean, 1),
            _layer_norm(grads.raw_scale, 1),
            v.unsqueeze(-2).expand(*slots.mean.shape[:-1], v.shape[-1]),
        ],
        dim=-1,
    )
    return AuxiliaryInputs(spatial=spatial, vector=vector)


def refine_step(aux: AuxiliaryInputs, refinement: RefinementNetwork, hidden: Hidden) -> tuple[torch.Tensor, Hidden]:
    """One slot-parallel refinement; returns the update [..., K, 2D] and the new hidden state."""
    lead = aux.vector.shape[:-1]
    spatial = aux.spatial.reshape(-1, *aux.spatial.shape[-3:])
    vector = aux.vector.reshape(-1, aux.vector.shape[-1])
    if hidden[0].shape[0] != vector.shape[0]:
        raise ShapeMismatchError(f"hidden state has {hidden[0].shape[0]} rows for {vector.shape[0]} slots")
    delta, hidden = refinement(spatial, vector, hidden)
    return delta.reshape(*lead, delta.shape[-1]), hidden


def inner_loop(
    prior: LatentSlots,
    x: torch.Tensor,
    v: torch.Tensor,
    num_iterations: int,
    model: MulMONNetwork,
    train_mode: bool = True,
    hidden: Hidden | None = None,
    generator: torch.Generator | None = None,
    noise: Sequence[torch.Tensor] | None = None,
    kl_weight: float = 1.0,
    keep_outputs: bool = False,
    view_index: int | None = None,
) -> InnerLoopResult:
    """
    Refine ``prior`` on one view for ``num_iterations`` steps.

    The KL term of every iteration l >= 1 is taken against ``prior`` (the previous
    view's posterior). In evaluation mode every update is detached so that state
    stays constant in size across views.
    """
    weights = inner_loop_weights(num_iterations)
    if noise is not None and len(noise) != num_iterations:
        raise ShapeMismatchError(f"got {len(noise)} noise draws for {num_iterations} iterations")
    if hidden is None:
        hidden = model.init_hidden(prior)
    sigma2 = model.sigma2

    slots = prior if prior.mean.requires_grad else prior.requires_grad_()
    if not train_mode:
        prior = prior.detach()
    trace = InnerLoopTrace(posteriors=[slots])
    nll_total = x.new_zeros(prior.batch_shape)
    kl_total = x.new_zeros(prior.batch_shape)

    with torch.enable_grad():
        for l in range(num_iterations):
            if not train_mode:
                slots = slots.requires_grad_()
            eps = noise[l] if noise is not None else draw_noise(slots, generator)
            out = model.render_latents(sample(slots, eps), v)
            nll = -mixture_log_likelihood(x, out, sigma2)
            kl = kl_gaussian(slots, prior) if l > 0 else torch.zeros_like(nll)
            loss = nll + kl_weight * kl
            if not torch.isfinite(loss).all():
                raise NumericError("non-finite inner-loop loss", view_index=view_index, iteration=l)

            grads = loss_gradients(x, out, slots, loss, sigma2, retain_graph=train_mode)
            aux = auxiliary_inputs(x, v, slots, out, grads, sigma2)
            delta, hidden = refine_step(aux, model.refinement, hidden)
            if not train_mode:
                delta = delta.detach()
                hidden = (hidden[0].detach(), hidden[1].detach())
                slots = slots.detach()
                nll, kl, loss = nll.detach(), kl.detach(), loss.detach()
                out = out.detach()
            slots = slots.update(delta)

            weight = float(weights[l])
            nll_total = nll_total + weight * nll
            kl_total = kl_total + weight * kl
            trace.posteriors.append(slots)
            trace.losses.append(loss)
            if keep_outputs:
                trace.outputs.append(out)

    return InnerLoopResult(
        posterior=slots,
        trace=trace,
        hidden=hidden,
        nll=nll_total,
        kl=kl_total,
        loss=nll_total + kl_weight * kl_total,
    )


def observe_sequence(
    views: Sequence[tuple[torch.Tensor, torch.Tensor]],
    model: MulMONNetwork,
    num_iterations: int,
    num_slots: int | None = None,
    train_mode: bool = True,
    prior: LatentSlots | None = None,
    hidden: Hidden | None = None,
    generator: torch.Generator | None = None,
    noise: Sequence[Sequence[torch.Tensor]] | None = None,
    kl_weight: float = 1.0,
    keep_results: bool = True,
) -> SequenceResult:
    """
    Absorb views one at a time; the posterior after view t is the prior of view t+1.

    ``views`` holds (image [..., 3, H, W], viewpoint [..., J]) pairs. ``noise``, when
    given, holds one list of per-iteration draws per view.
    """
    if not views:
        raise ValueError("observe_sequence needs at least one view")
    image_shape = views[0][0].shape
    for t, (x, _) in enumerate(views):
        if x.shape != image_shape:
            raise ShapeMismatchError(f"view {t} has image shape {tuple(x.shape)}, view 0 has {tuple(image_shape)}")
    first_image = views[0][0]
    if prior is None:
        prior = init_prior(
            num_slots or model.num_slots,
            model.z_dims,
            first_image.shape[:-3],
            dtype=first_image.dtype,
            device=first_image.device,
        )
    results = []
    for t, (x, v) in enumerate(views):
        result = inner_loop(
            prior,
            x,
            v,
            num_iterations,
            model,
            train_mode=train_mode,
            hidden=hidden,
            generator=generator,
            noise=noise[t] if noise is not None else None,
            kl_weight=kl_weight,
            view_index=t,
        )
        prior, hidden = result.posterior, result.hidden
        if keep_results:
            results.append(result)
    return SequenceResult(posterior=prior, hidden=hidden, views=results)
