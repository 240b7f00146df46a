"""
Static result files: PNG images and plots (matplotlib, Agg backend), CSV series
and JSON documents.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from pydantic import BaseModel  # noqa: E402


def _to_numpy(array) -> np.ndarray:
    if isinstance(array, torch.Tensor):
        return array.detach().cpu().numpy()
    return np.asarray(array)


def _prepare(path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    return target


def save_image(path: str | Path, image) -> Path:
    """Write a [3, H, W] image in [0, 1] (values are clipped)."""
    array = np.clip(_to_numpy(image).astype(np.float64), 0.0, 1.0).transpose(1, 2, 0)
    target = _prepare(path)
    plt.imsave(target, array)
    return target


def save_mask(path: str | Path, hard_masks, num_labels: int) -> Path:
    """Write an integer label map with one colour per label."""
    target = _prepare(path)
    plt.imsave(target, _to_numpy(hard_masks), cmap="tab10", vmin=0, vmax=max(num_labels - 1, 1))
    return target


def save_strip(path: str | Path, images: Sequence, titles: Sequence[str] | None = None) -> Path:
    """Lay [3, H, W] images out in one row."""
    count = len(images)
    fig, axes = plt.subplots(1, count, figsize=(1.6 * count, 1.8), squeeze=False)
    for index, (axis, image) in enumerate(zip(axes[0], images)):
        axis.imshow(np.clip(_to_numpy(image).astype(np.float64), 0.0, 1.0).transpose(1, 2, 0))
        axis.set_axis_off()
        if titles is not None:
            axis.set_title(titles[index], fontsize=7)
    fig.tight_layout()
    target = _prepare(path)
    fig.savefig(target, dpi=120)
    plt.close(fig)
    return target


def plot_series(
    path: str | Path,
    series: Mapping[str, Sequence[tuple[float, float]]],
    xlabel: str,
    ylabel: str,
    title: str | None = None,
) -> Path:
    fig, axis = plt.subplots(figsize=(4.0, 3.0))
    for name, points in series.items():
        if not points:
            continue
        xs, ys = zip(*points)
        axis.plot(xs, ys, marker="o", label=name)
    axis.set_xlabel(xlabel)
    axis.set_ylabel(ylabel)
    if title:
        axis.set_title(title)
    if len(series) > 1:
        axis.legend(fontsize=7)
    fig.tight_layout()
    target = _prepare(path)
    fig.savefig(target, dpi=120)
    plt.close(fig)
    return target


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    target = _prepare(path)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    return target


def write_json(path: str | Path, document: BaseModel | Mapping[str, Any]) -> Path:
    target = _prepare(path)
    if isinstance(document, BaseModel):
        target.write_text(document.model_dump_json(indent=2), encoding="utf-8")
    else:
        target.write_text(json.dumps(document, indent=2, default=str), encoding="utf-8")
    return target
