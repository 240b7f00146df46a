"""
Command-line entry point: ``mulmon <command> [options]``.

Commands: gen-data, train, eval, predict, traverse, ablate, sample. Every command
writes ``effective_config.json`` into its output directory. Exit codes: 0 success,
1 unexpected failure, 2 configuration error, 3 data or checkpoint error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import ExperimentConfig, SceneGenConfig, get_settings, load_experiment_config, settings_for_log
from .errors import ConfigError, MulmonError
from .evaluation import ablation_sweep, evaluate_dataset, uncertainty_curve
from .generative import RenderedScene
from .logs import MetricsLog, configure_logging
from .models import RunConfig
from .scene_data import generate_dataset, save_dataset
from .services.artifacts import plot_series, save_image, save_mask, save_strip, write_csv, write_json
from .services.checkpoints import CheckpointManager
from .services.dataset_store import DatasetStore
from .services.model_service import ModelService
from .training import train

logger = logging.getLogger(__name__)


def _int_list(text: str) -> list[int]:
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError as e:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from e


def _float_list(text: str) -> list[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError as e:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from e


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON experiment config file")
    parser.add_argument("--preset", help="named preset: full, toy or micro")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. train.batch_size=4 (repeatable)")
    parser.add_argument("--output", help="output directory (default: $MULMON_OUTPUT_ROOT/<command>)")
    parser.add_argument("--seed", type=int, help="root seed for every random substream")


def _add_checkpoint(parser: argparse.ArgumentParser, data: bool = True) -> None:
    parser.add_argument("--checkpoint", required=True, help="checkpoint file or checkpoint directory")
    if data:
        parser.add_argument("--data", required=True, help="dataset directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mulmon", description="Multi-view multi-object scene learning.")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="generate a procedural multi-view dataset")
    _add_common(gen)
    gen.add_argument("--views", type=int, help="views per scene")
    gen.add_argument("--workers", type=int, help="generation processes")

    train = commands.add_parser("train", help="train a model on a dataset")
    _add_common(train)
    train.add_argument("--data", required=True, help="dataset directory")
    train.add_argument("--resume", help="checkpoint file or directory to resume from")
    train.add_argument("--steps", type=int, help="total gradient steps")

    evaluate = commands.add_parser("eval", help="evaluate a checkpoint")
    _add_common(evaluate)
    _add_checkpoint(evaluate)
    evaluate.add_argument("--metrics", help="comma-separated: miou,rmse,pred_seg,uncertainty,dci")
    evaluate.add_argument("--split", help="dataset split to evaluate")
    evaluate.add_argument("--observed", type=int, help="number of observed views")

    predict = commands.add_parser("predict", help="predict observations and segmentations at query viewpoints")
    _add_common(predict)
    _add_checkpoint(predict)
    predict.add_argument("--scene", required=True, help="scene id")
    predict.add_argument("--observed", default="0", help="comma-separated observed view indices")
    predict.add_argument("--azimuths", help="comma-separated query azimuths in degrees")
    predict.add_argument("--query-views", help="comma-separated scene view indices to query")
    predict.add_argument("--mean-latent", action="store_true", help="render the posterior mean instead of a sample")

    traverse = commands.add_parser("traverse", help="latent traversal frame strips")
    _add_common(traverse)
    _add_checkpoint(traverse)
    traverse.add_argument("--scene", required=True)
    traverse.add_argument("--observed", default="0,1,2,3,4")
    traverse.add_argument("--slots", default="0", help="comma-separated slot indices")
    traverse.add_argument("--dims", default="0", help="comma-separated latent dimensions")
    traverse.add_argument("--range", dest="value_range", default="-2,2,7", help="min,max,count of traversal values")
    traverse.add_argument("--azimuths", default="0,90", help="comma-separated render azimuths in degrees")

    ablate = commands.add_parser("ablate", help="T, K or alpha_ig ablation sweep")
    _add_common(ablate)
    ablate.add_argument("--kind", required=True, choices=["T", "K", "alpha_ig"])
    ablate.add_argument("--grid", required=True, help="comma-separated grid values")
    ablate.add_argument("--data", required=True)
    ablate.add_argument("--checkpoint", help="trained checkpoint (T and K sweeps)")
    ablate.add_argument("--train-steps", type=int, help="training steps per alpha_ig value")

    sample = commands.add_parser("sample", help="compose random scenes from the prior")
    _add_common(sample)
    _add_checkpoint(sample, data=False)
    sample.add_argument("--count", type=int, default=8)
    sample.add_argument("--slots", type=int, help="number of slots to compose")
    return parser


class Run:
    """Resolved configuration and output directory for one command."""

    def __init__(self, args: argparse.Namespace, extra_overrides: Sequence[str] = ()):
        settings = get_settings()
        overrides = list(args.overrides) + list(extra_overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        self.config = load_experiment_config(args.config, overrides, args.preset)
        self.output_dir = Path(args.output or Path(settings.output_root) / args.command)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.device = settings.resolve_device()
        self.record = RunConfig(
            command=args.command,
            config_path=args.config,
            preset=args.preset,
            overrides=overrides,
            output_dir=str(self.output_dir),
            seed=self.config.seed,
        )
        if settings.deterministic:
            torch.use_deterministic_algorithms(True)

    def echo(self, config: ExperimentConfig | None = None) -> None:
        if config is not None:
            self.config = config
        write_json(
            self.output_dir / "effective_config.json",
            {"run": self.record.model_dump(mode="json"), "config": self.config.model_dump(mode="json")},
        )


def _open_service(run: Run, checkpoint: str) -> ModelService:
    service = ModelService(CheckpointManager(checkpoint).resolve(checkpoint), device=run.device)
    service.initialize()
    # model, data and training sections come from the checkpoint; eval settings and seed from the command line
    run.echo(service.config.model_copy(update={"eval": run.config.eval, "seed": run.config.seed}))
    service.config = run.config
    return service


def _with_dataset(config: ExperimentConfig, generation: SceneGenConfig) -> ExperimentConfig:
    """The dataset manifest's generation settings replace the data section."""
    try:
        return ExperimentConfig.model_validate({**config.model_dump(), "data": generation.model_dump()})
    except ValueError as e:
        raise ConfigError(f"config does not fit the dataset: {e}") from e


def _save_rendered(directory: Path, prefix: str, rendered: RenderedScene, num_slots: int) -> None:
    save_image(directory / f"{prefix}_image.png", rendered.image)
    save_mask(directory / f"{prefix}_segmentation.png", rendered.hard_masks, num_slots)
    save_strip(
        directory / f"{prefix}_components.png",
        list(rendered.component_images),
        titles=[f"slot {k}" for k in range(num_slots)],
    )


def cmd_gen_data(args: argparse.Namespace) -> int:
    extra = []
    if args.views is not None:
        extra.append(f"data.views_per_scene={args.views}")
    if args.workers is not None:
        extra.append(f"data.workers={args.workers}")
    if args.seed is not None:
        extra.append(f"data.rng_seed={args.seed}")
    run = Run(args, extra)
    run.echo()
    scenes, manifest = generate_dataset(run.config.data)
    stored = save_dataset(scenes, manifest, run.output_dir / "dataset")
    for key, value in stored.summary().items():
        print(f"{key}: {value}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    extra = [f"train.total_steps={args.steps}"] if args.steps is not None else []
    run = Run(args, extra)
    store = DatasetStore(args.data)
    manifest = store.load_manifest()
    config = _with_dataset(run.config, manifest.generation)
    run.echo(config)
    scenes = store.load_split("train")
    trainer = train(scenes, config, run.output_dir, resume=args.resume, device=run.device)
    print(f"step {trainer.step}")
    print(f"checkpoints: {trainer.checkpoints.directory}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    extra = []
    if args.metrics:
        extra.append("eval.metrics=" + json.dumps([m.strip() for m in args.metrics.split(",") if m.strip()]))
    if args.split:
        extra.append(f"eval.split={args.split}")
    if args.observed is not None:
        extra.append(f"eval.num_observed={args.observed}")
    run = Run(args, extra)
    service = _open_service(run, args.checkpoint)
    config = service.config
    scenes = DatasetStore(args.data).load_split(config.eval.split)
    summary = evaluate_dataset(service.model, scenes, config.eval, config.train.num_iterations, seed=config.seed)
    MetricsLog(run.output_dir / "metrics.jsonl").append(summary)
    (run.output_dir / "summary.txt").write_text(summary.table() + "\n", encoding="utf-8")
    print(summary.table())
    if "uncertainty" in config.eval.metrics:
        curve = uncertainty_curve(
            service.model,
            scenes,
            config.train.num_iterations,
            max_views=config.eval.max_views_uncertainty,
            n_samples=config.eval.num_samples,
            num_orderings=config.eval.num_orderings,
            seed=config.seed,
        )
        MetricsLog(run.output_dir / "metrics.jsonl").append(curve)
        write_csv(run.output_dir / "uncertainty.csv", ["views", "mean_variance"], zip(curve.views, curve.mean))
        plot_series(
            run.output_dir / "uncertainty.png",
            {"mean": list(zip(curve.views, curve.mean))},
            xlabel="observed views T",
            ylabel="pixel variance",
            title="Uncertainty vs. T",
        )
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    run = Run(args)
    service = _open_service(run, args.checkpoint)
    scene = DatasetStore(args.data).load_scene(args.scene)
    observed = _int_list(args.observed)
    labels: list[str] = []
    rows = []
    if args.query_views:
        indices = _int_list(args.query_views)
        viewpoints = service.scene_viewpoints(scene, indices)
        labels = [f"view{i}" for i in indices]
    else:
        degrees = _float_list(args.azimuths or "0,90,180,270")
        viewpoints = service.query_viewpoints([math.radians(d) for d in degrees])
        labels = [f"az{d:g}" for d in degrees]
    rendered = service.predict(scene, observed, viewpoints, mean_latent=args.mean_latent, seed=run.config.seed)
    num_slots = rendered.soft_masks.shape[-3]
    for q, label in enumerate(labels):
        view = RenderedScene(
            image=rendered.image[q],
            soft_masks=rendered.soft_masks[q],
            hard_masks=rendered.hard_masks[q],
            component_images=rendered.component_images[q],
        )
        _save_rendered(run.output_dir, label, view, num_slots)
        rows.append([label, *viewpoints[q].tolist()])
    write_csv(run.output_dir / "queries.csv", ["query", "cos_azimuth", "sin_azimuth", "radius"], rows)
    print(f"wrote {len(labels)} predictions to {run.output_dir}")
    return 0


def cmd_traverse(args: argparse.Namespace) -> int:
    run = Run(args)
    service = _open_service(run, args.checkpoint)
    scene = DatasetStore(args.data).load_scene(args.scene)
    low, high, count = _float_list(args.value_range)
    values = np.linspace(low, high, int(count)).tolist()
    viewpoints = service.query_viewpoints([math.radians(d) for d in _float_list(args.azimuths)])
    for slot in _int_list(args.slots):
        for dim in _int_list(args.dims):
            frames = service.traverse(scene, _int_list(args.observed), slot, dim, values, viewpoints)
            for v in range(viewpoints.shape[0]):
                save_strip(
                    run.output_dir / f"slot{slot}_dim{dim}_view{v}.png",
                    [frame.image[v] for frame in frames],
                    titles=[f"{value:.2f}" for value in values],
                )
    print(f"wrote traversal strips to {run.output_dir}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    run = Run(args)
    store = DatasetStore(args.data)
    grid = _float_list(args.grid)
    model = None
    config = run.config
    if args.kind in ("T", "K"):
        if not args.checkpoint:
            raise ConfigError(f"--checkpoint is required for the {args.kind} sweep")
        service = _open_service(run, args.checkpoint)
        model, config = service.model, service.config
    else:
        config = _with_dataset(config, store.load_manifest().generation)
        run.echo(config)
    eval_scenes = store.load_split(config.eval.split)
    train_scenes = store.load_split("train") if args.kind == "alpha_ig" else None
    result = ablation_sweep(
        args.kind,
        grid,
        config,
        eval_scenes,
        model=model,
        train_scenes=train_scenes,
        output_dir=run.output_dir / "runs",
        train_steps=args.train_steps,
    )
    write_json(run.output_dir / "ablation.json", result)
    names = sorted({name for row in result.rows for name in row.metrics})
    write_csv(
        run.output_dir / "ablation.csv",
        [args.kind, *names],
        ([row.value, *[row.metrics.get(name, "") for name in names]] for row in result.rows),
    )
    series = {name: points for name, points in result.series().items() if not name.endswith("_sd")}
    plot_series(run.output_dir / "ablation.png", series, xlabel=args.kind, ylabel="score")
    for row in result.rows:
        print(f"{args.kind}={row.value:g}: " + ", ".join(f"{k}={v:.4f}" for k, v in sorted(row.metrics.items())))
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    run = Run(args)
    service = _open_service(run, args.checkpoint)
    scenes = service.sample_scenes(args.count, run.config.seed, args.slots)
    for index, rendered in enumerate(scenes):
        _save_rendered(run.output_dir, f"sample{index:03d}", rendered, rendered.soft_masks.shape[-3])
    print(f"wrote {len(scenes)} random scenes to {run.output_dir}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "traverse": cmd_traverse,
    "ablate": cmd_ablate,
    "sample": cmd_sample,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = get_settings()
    except ValueError as e:
        print(f"error: invalid environment settings: {e}", file=sys.stderr)
        return ConfigError.exit_code
    configure_logging(settings.log_level)
    logger.info("Loaded settings: %s", settings_for_log(settings))
    try:
        return COMMANDS[args.command](args)
    except MulmonError as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.error("%s failed unexpectedly: %s", args.command, e, exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
