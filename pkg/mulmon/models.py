"""
Pydantic records for manifests, logs and evaluation reports
"""
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import SceneGenConfig

SCHEMA_VERSION = 1
FACTOR_NAMES = ("shape", "color_r", "color_g", "color_b", "size", "position_x", "position_y", "metal")
SHAPE_IDS = {"background": 0, "circle": 1, "square": 2, "triangle": 3, "diamond": 4}


class ObjectSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    shape: Literal["background", "circle", "square", "triangle", "diamond"]
    color: tuple[float, float, float]
    size: float = Field(..., gt=0)
    position: tuple[float, float] = (0.0, 0.0)
    depth_rank: int = Field(..., ge=0)
    metal: bool = False

    @field_validator("color")
    @classmethod
    def validate_color(cls, value: tuple[float, float, float]):
        if any(not 0.0 <= c <= 1.0 for c in value):
            raise ValueError("color components must lie in [0, 1]")
        return value

    def factors(self) -> list[float]:
        return [
            float(SHAPE_IDS[self.shape]),
            *map(float, self.color),
            float(self.size),
            *map(float, self.position),
            float(self.metal),
        ]


class SceneEntry(BaseModel):
    scene_id: str
    split: str
    chunk: str
    sha256: str
    objects: list[ObjectSpec]

    @model_validator(mode="after")
    def validate_depth_ranks(self):
        ranks = [obj.depth_rank for obj in self.objects]
        if len(set(ranks)) != len(ranks):
            raise ValueError(f"depth_rank must be unique within scene {self.scene_id}")
        if not self.objects or self.objects[0].shape != "background":
            raise ValueError(f"object 0 of scene {self.scene_id} must be the background")
        return self


class DatasetManifest(BaseModel):
    schema_version: int = SCHEMA_VERSION
    name: str
    height: int = Field(..., ge=1)
    width: int = Field(..., ge=1)
    viewpoint_dims: int = 3
    views_per_scene: int = Field(..., ge=2)
    rng_seed: int
    splits: dict[str, int]
    factor_names: list[str] = Field(default_factory=lambda: list(FACTOR_NAMES))
    generation: SceneGenConfig
    scenes: list[SceneEntry] = Field(default_factory=list)

    def scene_ids(self, split: str | None = None) -> list[str]:
        return [entry.scene_id for entry in self.scenes if split is None or entry.split == split]

    def summary(self) -> dict:
        return {
            "name": self.name,
            "image_size": f"{self.height}x{self.width}",
            "views_per_scene": self.views_per_scene,
            "splits": self.splits,
            "rng_seed": self.rng_seed,
        }


class LossRecord(BaseModel):
    step: int
    total: float
    observed_nll: float
    query_nll: float
    ig_term: float
    alpha_ig: float
    learning_rate: float
    num_observed: int
    num_query: int
    seconds: float = 0.0


class MatchedSegmentation(BaseModel):
    assignment: dict[int, Optional[int]]
    per_object_iou: dict[int, float]
    mean_iou: float = Field(..., ge=0.0, le=1.0)


class MetricSummary(BaseModel):
    mean: float
    sd: float
    values: list[float]


class EvaluationSummary(BaseModel):
    split: str
    num_scenes: int
    num_observed: int
    metrics: dict[str, MetricSummary]

    def table(self) -> str:
        lines = [f"{'metric':<12} {'mean':>8} {'sd':>8}"]
        for name, summary in self.metrics.items():
            lines.append(f"{name:<12} {summary.mean:>8.4f} {summary.sd:>8.4f}")
        return "\n".join(lines)


class UncertaintyCurve(BaseModel):
    views: list[int]
    per_scene: list[list[float]]
    mean: list[float]

    @model_validator(mode="after")
    def validate_non_negative(self):
        if any(value < 0 for row in self.per_scene for value in row):
            raise ValueError("pixel variances must be non-negative")
        return self


class DCIReport(BaseModel):
    disentanglement: float = Field(..., ge=0.0, le=1.0)
    completeness: float = Field(..., ge=0.0, le=1.0)
    informativeness: float = Field(..., ge=0.0, le=1.0)
    factor_errors: dict[str, float]
    importance_matrix: list[list[float]]
    excluded_factors: list[str] = Field(default_factory=list)


class AblationRow(BaseModel):
    kind: Literal["T", "K", "alpha_ig"]
    value: float
    metrics: dict[str, float]


class AblationResult(BaseModel):
    kind: Literal["T", "K", "alpha_ig"]
    rows: list[AblationRow]

    def series(self) -> dict[str, list[tuple[float, float]]]:
        names = sorted({name for row in self.rows for name in row.metrics})
        return {
            name: [(row.value, row.metrics[name]) for row in self.rows if name in row.metrics]
            for name in names
        }


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    command: str
    config_path: Optional[str] = None
    preset: Optional[str] = None
    overrides: list[str] = Field(default_factory=list)
    output_dir: str
    seed: int
