"""
Quantitative protocols: matched-mask mIoU, novel-view RMSE and segmentation,
predictive uncertainty, DCI disentanglement, latent traversals and ablations.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
import scipy.stats
import torch
from scipy.optimize import linear_sum_assignment
from sklearn.ensemble import RandomForestRegressor

from .config import EvalConfig, ExperimentConfig, derive_seed
from .errors import ShapeMismatchError
from .generative import RenderedScene, render
from .inference import observe_sequence
from .latent_state import LatentSlots, draw_noise, sample
from .models import (
    FACTOR_NAMES,
    AblationResult,
    AblationRow,
    DCIReport,
    EvaluationSummary,
    MatchedSegmentation,
    MetricSummary,
    UncertaintyCurve,
)
from .network import MulMONNetwork
from .scene_data import SceneRecord
from .training import Trainer

logger = logging.getLogger(__name__)

MatchingStrategy = Literal["hungarian", "greedy", "best"]


def _as_numpy(array) -> np.ndarray:
    if isinstance(array, torch.Tensor):
        return array.detach().cpu().numpy()
    return np.asarray(array)


def pairwise_iou(pred_hard_masks, gt_masks, num_slots: int | None = None, include_background: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """IoU of every ground-truth object (rows) against every slot (columns); also returns the gt labels."""
    pred = _as_numpy(pred_hard_masks).astype(np.int64).ravel()
    gt = _as_numpy(gt_masks).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"predicted masks {np.shape(pred_hard_masks)} vs ground truth {np.shape(gt_masks)}")
    labels = np.unique(gt)
    if not include_background:
        labels = labels[labels != 0]
    if labels.size == 0:
        raise ValueError("ground truth contains no objects to match")
    slots = int(num_slots if num_slots is not None else pred.max() + 1)
    gt_index = np.searchsorted(labels, gt)
    valid = (gt_index < labels.size) & (labels[np.minimum(gt_index, labels.size - 1)] == gt)
    joint = np.bincount(gt_index[valid] * slots + pred[valid], minlength=labels.size * slots)
    intersection = joint.reshape(labels.size, slots).astype(np.float64)
    gt_area = np.array([(gt == label).sum() for label in labels], dtype=np.float64)
    pred_area = np.bincount(pred, minlength=slots)[:slots].astype(np.float64)
    union = gt_area[:, None] + pred_area[None, :] - intersection
    return np.divide(intersection, union, out=np.zeros_like(intersection), where=union > 0), labels


def _greedy_assignment(iou: np.ndarray) -> dict[int, int]:
    assignment: dict[int, int] = {}
    used: set[int] = set()
    # descending IoU; ties go to the lower slot, then the lower object
    order = sorted(
        ((iou[i, j], i, j) for i in range(iou.shape[0]) for j in range(iou.shape[1])),
        key=lambda item: (-item[0], item[2], item[1]),
    )
    for _, row, col in order:
        if row in assignment or col in used:
            continue
        assignment[row] = col
        used.add(col)
    return assignment


def miou_matched(
    pred_hard_masks,
    gt_masks,
    num_slots: int | None = None,
    strategy: MatchingStrategy = "hungarian",
    include_background: bool = True,
) -> MatchedSegmentation:
    """
    Register predicted slots to ground-truth objects and average the IoU over objects.

    ``hungarian`` is the optimal injective assignment, ``greedy`` matches in
    descending IoU order without reusing slots, ``best`` lets each object take
    its best slot even if another object already took it.
    """
    iou, labels = pairwise_iou(pred_hard_masks, gt_masks, num_slots, include_background)
    if strategy == "hungarian":
        rows, cols = linear_sum_assignment(iou, maximize=True)
        matched = dict(zip(rows.tolist(), cols.tolist()))
    elif strategy == "greedy":
        matched = _greedy_assignment(iou)
    elif strategy == "best":
        matched = {row: int(iou[row].argmax()) for row in range(iou.shape[0])}
    else:
        raise ValueError(f"unknown matching strategy {strategy!r}")

    assignment: dict[int, int | None] = {}
    per_object: dict[int, float] = {}
    for row, label in enumerate(labels.tolist()):
        col = matched.get(row)
        assignment[label] = col
        per_object[label] = float(iou[row, col]) if col is not None else 0.0
    mean_iou = float(np.mean(list(per_object.values())))
    return MatchedSegmentation(assignment=assignment, per_object_iou=per_object, mean_iou=min(max(mean_iou, 0.0), 1.0))


def rmse(pred, gt) -> float:
    pred_array = _as_numpy(pred).astype(np.float64)
    gt_array = _as_numpy(gt).astype(np.float64)
    if pred_array.shape != gt_array.shape:
        raise ShapeMismatchError(f"prediction {pred_array.shape} vs ground truth {gt_array.shape}")
    return float(np.sqrt(np.mean((pred_array - gt_array) ** 2)))


@torch.no_grad()
def predict_novel_view(
    model: MulMONNetwork,
    posterior: LatentSlots,
    viewpoint: torch.Tensor,
    mean_latent: bool = True,
    generator: torch.Generator | None = None,
) -> RenderedScene:
    """Render the scene belief at a query viewpoint, from the posterior mean or one sample."""
    z = posterior.mean if mean_latent else sample(posterior, draw_noise(posterior, generator))
    if viewpoint.dim() > z.dim() - 1:
        z = z.unsqueeze(-3).expand(*viewpoint.shape[:-1], *z.shape[-2:])
    return render(model.render_latents(z, viewpoint))


def observe_scene(
    model: MulMONNetwork,
    images: torch.Tensor,
    viewpoints: torch.Tensor,
    num_iterations: int,
    num_slots: int | None = None,
    generator: torch.Generator | None = None,
) -> LatentSlots:
    """Evaluation-mode posterior after absorbing ``images [..., T, 3, H, W]`` in order."""
    views = [(images[..., t, :, :, :], viewpoints[..., t, :]) for t in range(images.shape[-4])]
    result = observe_sequence(
        views, model, num_iterations, num_slots=num_slots, train_mode=False, generator=generator, keep_results=False
    )
    return result.posterior


def pixel_variance(predictions: torch.Tensor) -> torch.Tensor:
    """Unbiased variance over samples (dim 0), averaged over everything but the batch dims."""
    if predictions.shape[0] < 2:
        raise ValueError("pixel variance needs at least 2 samples")
    return predictions.var(dim=0, unbiased=True).mean(dim=(-3, -2, -1))


@torch.no_grad()
def posterior_predictive_variance(
    model: MulMONNetwork,
    posterior: LatentSlots,
    viewpoints: torch.Tensor,
    n_samples: int = 10,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """
    Draw ``n_samples`` latents, render each at every query viewpoint
    (``viewpoints [..., Q, J]``) and return the mean pixel variance per scene.
    """
    if n_samples < 2:
        raise ValueError(f"need at least 2 posterior samples, got {n_samples}")
    per_query = []
    for q in range(viewpoints.shape[-2]):
        renders = []
        for _ in range(n_samples):
            z = sample(posterior, draw_noise(posterior, generator))
            renders.append(render(model.render_latents(z, viewpoints[..., q, :])).image)
        per_query.append(pixel_variance(torch.stack(renders)))
    return torch.stack(per_query).mean(dim=0)


def _scene_tensors(
    scenes: Sequence[SceneRecord], orders: Sequence[Sequence[int]], dtype: torch.dtype, device
) -> tuple[torch.Tensor, torch.Tensor, np.ndarray]:
    images = np.stack([scene.images[list(order)] for scene, order in zip(scenes, orders)])
    viewpoints = np.stack([scene.viewpoints[list(order)] for scene, order in zip(scenes, orders)])
    masks = np.stack([scene.masks[list(order)] for scene, order in zip(scenes, orders)])
    return (
        torch.from_numpy(images).to(device=device, dtype=dtype),
        torch.from_numpy(viewpoints).to(device=device, dtype=dtype),
        masks,
    )


def _model_tensor_kind(model: MulMONNetwork) -> tuple[torch.dtype, torch.device]:
    parameter = next(model.parameters())
    return parameter.dtype, parameter.device


def predictive_uncertainty(
    model: MulMONNetwork,
    scene: SceneRecord,
    num_views: int,
    num_iterations: int,
    n_samples: int = 10,
    order: Sequence[int] | None = None,
    generator: torch.Generator | None = None,
) -> float:
    """Mean pixel variance of predictions at every scene viewpoint after observing ``num_views`` views."""
    if num_views > len(scene.views):
        raise ValueError(f"scene {scene.scene_id} has only {len(scene.views)} views")
    order = list(order) if order is not None else list(range(len(scene.views)))
    dtype, device = _model_tensor_kind(model)
    images, viewpoints, _ = _scene_tensors([scene], [order], dtype, device)
    posterior = observe_scene(model, images[:, :num_views], viewpoints[:, :num_views], num_iterations, generator=generator)
    return float(posterior_predictive_variance(model, posterior, viewpoints, n_samples, generator)[0])


def uncertainty_curve(
    model: MulMONNetwork,
    scenes: Sequence[SceneRecord],
    num_iterations: int,
    max_views: int = 5,
    n_samples: int = 10,
    num_orderings: int = 5,
    seed: int = 0,
    num_slots: int | None = None,
) -> UncertaintyCurve:
    """
    Predictive variance after T = 1..max_views observed views, averaged over seeded
    view orderings; one incremental pass over the views per ordering.
    """
    dtype, device = _model_tensor_kind(model)
    rng = np.random.default_rng(derive_seed(seed, "uncertainty"))
    generator = torch.Generator(device="cpu").manual_seed(derive_seed(seed, "uncertainty-noise"))
    per_scene = []
    for scene in scenes:
        views = min(max_views, len(scene.views))
        curves = np.zeros((num_orderings, views))
        for ordering in range(num_orderings):
            order = rng.permutation(len(scene.views)).tolist()
            images, viewpoints, _ = _scene_tensors([scene], [order], dtype, device)
            prior, hidden = None, None
            for t in range(views):
                result = observe_sequence(
                    [(images[:, t], viewpoints[:, t])],
                    model,
                    num_iterations,
                    num_slots=num_slots,
                    train_mode=False,
                    prior=prior,
                    hidden=hidden,
                    generator=generator,
                    keep_results=False,
                )
                prior, hidden = result.posterior, result.hidden
                curves[ordering, t] = float(posterior_predictive_variance(model, prior, viewpoints, n_samples, generator)[0])
        per_scene.append(curves.mean(axis=0).tolist())
    width = min(len(row) for row in per_scene)
    mean = np.mean([row[:width] for row in per_scene], axis=0).tolist()
    return UncertaintyCurve(views=list(range(1, width + 1)), per_scene=per_scene, mean=mean)


def reduction_rate(curve: Sequence[float], t_end: int = 3) -> float:
    """Relative decrease of predictive variance per additional view between T=1 and T=t_end."""
    if t_end < 2 or t_end > len(curve):
        raise ValueError(f"t_end must lie in [2, {len(curve)}], got {t_end}")
    start = curve[0]
    if start <= 0:
        return 0.0
    return (start - curve[t_end - 1]) / (start * (t_end - 1))


def dci_scores(
    representations,
    factors,
    factor_names: Sequence[str] | None = None,
    num_trees: int = 100,
    seed: int = 0,
    min_instances: int = 100,
    train_fraction: float = 0.8,
) -> DCIReport:
    """
    Disentanglement, completeness and informativeness from random-forest
    importance matrices (one regressor per factor).
    """
    codes = _as_numpy(representations).astype(np.float64)
    targets = _as_numpy(factors).astype(np.float64)
    if codes.ndim != 2 or targets.ndim != 2 or codes.shape[0] != targets.shape[0]:
        raise ShapeMismatchError(f"representations {codes.shape} and factors {targets.shape} must be [N, *] with equal N")
    if codes.shape[0] < min_instances:
        raise ValueError(f"DCI needs at least {min_instances} object instances, got {codes.shape[0]}")
    names = list(factor_names) if factor_names is not None else [f"factor_{i}" for i in range(targets.shape[1])]

    spread = targets.std(axis=0)
    keep = spread > 1e-12
    excluded = [name for name, kept in zip(names, keep) if not kept]
    if excluded:
        logger.warning("Excluding zero-variance factors from DCI: %s", ", ".join(excluded))
    targets = (targets[:, keep] - targets[:, keep].mean(axis=0)) / spread[keep]
    names = [name for name, kept in zip(names, keep) if kept]
    if not names:
        raise ValueError("every factor has zero variance")

    rng = np.random.default_rng(seed)
    order = rng.permutation(codes.shape[0])
    split = int(train_fraction * codes.shape[0])
    train_idx, test_idx = order[:split], order[split:]
    num_codes, num_factors = codes.shape[1], targets.shape[1]

    importance = np.zeros((num_codes, num_factors))
    errors: dict[str, float] = {}
    for f, name in enumerate(names):
        forest = RandomForestRegressor(n_estimators=num_trees, random_state=seed + f)
        forest.fit(codes[train_idx], targets[train_idx, f])
        importance[:, f] = np.abs(forest.feature_importances_)
        prediction = forest.predict(codes[test_idx])
        errors[name] = float(np.sqrt(np.mean((prediction - targets[test_idx, f]) ** 2)))

    if num_factors > 1:
        per_code = 1.0 - scipy.stats.entropy(importance.T + 1e-11, base=num_factors)
        code_weight = importance.sum(axis=1) / max(importance.sum(), 1e-11)
        disentanglement = float(np.sum(per_code * code_weight))
    else:
        disentanglement = 1.0
    if num_codes > 1:
        completeness = float(np.mean(1.0 - scipy.stats.entropy(importance + 1e-11, base=num_codes)))
    else:
        completeness = 1.0
    informativeness = float(np.mean([1.0 - err for err in errors.values()]))
    clip = lambda value: float(min(max(value, 0.0), 1.0))  # noqa: E731
    return DCIReport(
        disentanglement=clip(disentanglement),
        completeness=clip(completeness),
        informativeness=clip(informativeness),
        factor_errors=errors,
        importance_matrix=importance.tolist(),
        excluded_factors=excluded,
    )


@torch.no_grad()
def latent_traversal(
    model: MulMONNetwork,
    posterior: LatentSlots,
    slot: int,
    dim: int,
    values: Iterable[float],
    viewpoint: torch.Tensor,
) -> list[RenderedScene]:
    """
    Render z = posterior mean with z[slot, dim] swept over ``values``; ``viewpoint``
    may be [J] or [V, J] to render each frame from several views.
    """
    if posterior.mean.dim() != 2:
        raise ShapeMismatchError("traversal expects an unbatched [K, D] posterior")
    if not 0 <= slot < posterior.num_slots:
        raise IndexError(f"slot {slot} out of range for K={posterior.num_slots}")
    if not 0 <= dim < posterior.z_dims:
        raise IndexError(f"dimension {dim} out of range for D={posterior.z_dims}")
    frames = []
    for value in values:
        z = posterior.mean.clone()
        z[slot, dim] = value
        if viewpoint.dim() > 1:
            z = z.unsqueeze(0).expand(viewpoint.shape[0], *z.shape)
        frames.append(render(model.render_latents(z, viewpoint)))
    return frames


@dataclass
class _SeedMetrics:
    values: dict[str, list[float]]

    def add(self, name: str, value: float) -> None:
        self.values.setdefault(name, []).append(value)


def collect_object_representations(
    model: MulMONNetwork,
    scenes: Sequence[SceneRecord],
    num_observed: int,
    num_iterations: int,
    seed: int = 0,
    num_slots: int | None = None,
    strategy: MatchingStrategy = "hungarian",
) -> tuple[np.ndarray, np.ndarray]:
    """
    (posterior mean of the matched slot, object factors) pairs for every foreground
    object and every observed view; unmatched slots are dropped.
    """
    dtype, device = _model_tensor_kind(model)
    generator = torch.Generator(device="cpu").manual_seed(derive_seed(seed, "dci"))
    representations, factors = [], []
    for scene in scenes:
        count = min(num_observed, len(scene.views))
        order = list(range(count))
        images, viewpoints, masks = _scene_tensors([scene], [order], dtype, device)
        posterior = observe_scene(model, images, viewpoints, num_iterations, num_slots, generator)
        rendered = predict_novel_view(model, posterior.index(0), viewpoints[0])
        scene_factors = scene.factors
        for t in range(count):
            if not (masks[0, t] > 0).any():
                continue
            matched = miou_matched(
                rendered.hard_masks[t], masks[0, t], posterior.num_slots, strategy, include_background=False
            )
            for label, slot in matched.assignment.items():
                if slot is None:
                    continue
                representations.append(posterior.mean[0, slot].cpu().numpy())
                factors.append(scene_factors[label])
    if not representations:
        return np.zeros((0, model.z_dims)), np.zeros((0, len(FACTOR_NAMES)))
    return np.stack(representations).astype(np.float64), np.stack(factors)


def evaluate_dataset(
    model: MulMONNetwork,
    scenes: Sequence[SceneRecord],
    config: EvalConfig,
    num_iterations: int,
    seed: int = 0,
    num_slots: int | None = None,
    num_observed: int | None = None,
) -> EvaluationSummary:
    """
    Observe ``num_observed`` randomly ordered views per scene, then score the
    observed-view segmentation (miou), query-view prediction (rmse, pred_seg),
    query-view predictive variance (uncertainty) and DCI, each reported as
    mean and sd over ``config.num_seeds`` seeds.
    """
    if not scenes:
        raise ValueError("evaluate_dataset needs at least one scene")
    requested = num_observed or config.num_observed
    num_observed = min(requested, min(len(scene.views) for scene in scenes) - 1)
    if num_observed < requested:
        logger.warning("Observing %s views instead of %s; at least one view per scene is kept as a query", num_observed, requested)
    dtype, device = _model_tensor_kind(model)
    per_seed: dict[str, list[float]] = {}
    for seed_index in range(config.num_seeds):
        run_seed = derive_seed(seed, f"eval-{seed_index}")
        rng = np.random.default_rng(run_seed)
        generator = torch.Generator(device="cpu").manual_seed(run_seed)
        scores = _SeedMetrics(values={})
        for start in range(0, len(scenes), config.batch_size):
            chunk = list(scenes[start : start + config.batch_size])
            orders = [rng.permutation(len(scene.views)).tolist() for scene in chunk]
            images, viewpoints, masks = _scene_tensors(chunk, orders, dtype, device)
            observed = num_observed
            posterior = observe_scene(
                model, images[:, :observed], viewpoints[:, :observed], num_iterations, num_slots, generator
            )
            slots = posterior.num_slots
            for b in range(len(chunk)):
                belief = posterior.index(b)
                rendered = predict_novel_view(model, belief, viewpoints[b], mean_latent=config.mean_latent, generator=generator)
                if "miou" in config.metrics:
                    scores.add("miou", float(np.mean([
                        miou_matched(rendered.hard_masks[t], masks[b, t], slots, config.matching, config.include_background).mean_iou
                        for t in range(observed)
                    ])))
                queries = range(observed, images.shape[1])
                if "rmse" in config.metrics:
                    scores.add("rmse", float(np.mean([rmse(rendered.image[t], images[b, t]) for t in queries])))
                if "pred_seg" in config.metrics:
                    scores.add("pred_seg", float(np.mean([
                        miou_matched(rendered.hard_masks[t], masks[b, t], slots, config.matching, config.include_background).mean_iou
                        for t in queries
                    ])))
            if "uncertainty" in config.metrics:
                variance = posterior_predictive_variance(
                    model, posterior, viewpoints[:, observed:], config.num_samples, generator
                )
                for value in variance.tolist():
                    scores.add("uncertainty", value)
        for name, values in scores.values.items():
            per_seed.setdefault(name, []).append(float(np.mean(values)))
        if "dci" in config.metrics:
            representations, factors = collect_object_representations(
                model, scenes, num_observed, num_iterations, run_seed, num_slots, config.matching
            )
            if representations.shape[0] < config.dci_min_instances:
                logger.warning(
                    "Skipping DCI for seed %s: %s object instances, need %s",
                    seed_index,
                    representations.shape[0],
                    config.dci_min_instances,
                )
            else:
                report = dci_scores(
                    representations,
                    factors,
                    FACTOR_NAMES,
                    num_trees=config.dci_trees,
                    seed=run_seed,
                    min_instances=config.dci_min_instances,
                )
                per_seed.setdefault("dci_d", []).append(report.disentanglement)
                per_seed.setdefault("dci_c", []).append(report.completeness)
                per_seed.setdefault("dci_i", []).append(report.informativeness)
        logger.info("Evaluation seed %s/%s done", seed_index + 1, config.num_seeds)

    metrics = {
        name: MetricSummary(
            mean=float(np.mean(values)),
            sd=float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
            values=values,
        )
        for name, values in per_seed.items()
    }
    return EvaluationSummary(split=config.split, num_scenes=len(scenes), num_observed=num_observed, metrics=metrics)


def ablation_sweep(
    kind: Literal["T", "K", "alpha_ig"],
    grid: Sequence[float],
    config: ExperimentConfig,
    eval_scenes: Sequence[SceneRecord],
    model: MulMONNetwork | None = None,
    train_scenes: Sequence[SceneRecord] | None = None,
    output_dir: str | Path | None = None,
    train_steps: int | None = None,
    t_end: int = 3,
) -> AblationResult:
    """
    T and K sweeps evaluate one trained model across the grid. The alpha_ig sweep
    trains one short model per coefficient and reports the uncertainty-reduction rate.
    """
    rows = []
    eval_config = config.eval.model_copy(update={"metrics": ["miou", "rmse", "pred_seg"]})
    if kind in ("T", "K"):
        if model is None:
            raise ValueError(f"the {kind} sweep needs a trained model")
        max_objects = config.data.max_objects + 1
        for value in grid:
            if kind == "K" and value < max_objects:
                logger.warning("K=%s is below the %s objects a scene can hold; expect degraded scores", value, max_objects)
            summary = evaluate_dataset(
                model,
                eval_scenes,
                eval_config,
                config.train.num_iterations,
                seed=config.seed,
                num_slots=int(value) if kind == "K" else None,
                num_observed=int(value) if kind == "T" else None,
            )
            metrics = {name: item.mean for name, item in summary.metrics.items()}
            metrics.update({f"{name}_sd": item.sd for name, item in summary.metrics.items()})
            rows.append(AblationRow(kind=kind, value=float(value), metrics=metrics))
    elif kind == "alpha_ig":
        if train_scenes is None or output_dir is None:
            raise ValueError("the alpha_ig sweep needs training scenes and an output directory")
        for value in grid:
            run_config = config.model_copy(deep=True)
            run_config.train.alpha_ig = float(value)
            trainer = Trainer(train_scenes, run_config, Path(output_dir) / f"alpha_ig-{value:g}")
            trainer.fit(total_steps=train_steps or run_config.train.total_steps, progress=False)
            curve = uncertainty_curve(
                trainer.model,
                eval_scenes,
                run_config.train.num_iterations,
                max_views=max(t_end, 2),
                n_samples=config.eval.num_samples,
                num_orderings=config.eval.num_orderings,
                seed=config.seed,
            )
            rows.append(
                AblationRow(
                    kind=kind,
                    value=float(value),
                    metrics={"reduction_rate": reduction_rate(curve.mean, t_end), **{f"variance_t{t}": v for t, v in zip(curve.views, curve.mean)}},
                )
            )
    else:
        raise ValueError(f"unknown ablation kind {kind!r}")
    return AblationResult(kind=kind, rows=rows)
