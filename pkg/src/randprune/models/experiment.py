from __future__ import annotations

import typing as t
from pathlib import Path

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    model_validator,
)

from randprune.config import config

__all__ = (
    "TrainConfig",
    "RECIPES",
    "NetworkSource",
    "DatasetSource",
    "SparsitySource",
    "MetricToggles",
    "ExperimentConfig",
    "SweepSpec",
    "RatioMethod",
    "SweepAxis",
)

RatioMethod = t.Literal[
    "dense",
    "uniform",
    "uniform_plus",
    "er",
    "erk",
    "erk_plus",
    "erk_last",
    "snip",
    "grasp",
    "external",
]
RATIO_METHODS: tuple[str, ...] = t.get_args(RatioMethod)
SweepAxis = t.Literal["depth", "width", "sparsity", "method"]


class _Document(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class TrainConfig(_Document):
    epochs: PositiveInt = 40
    batch_size: PositiveInt = 64
    learning_rate: PositiveFloat = 0.1
    # Zero momentum / weight decay are allowed for ablations and tests
    momentum: NonNegativeFloat = Field(default=0.9, lt=1.0)
    lr_decay_factor: PositiveFloat = 10.0
    decay_milestones: tuple[PositiveInt, ...] = (20, 30)
    weight_decay: NonNegativeFloat = 5e-4

    @model_validator(mode="before")
    @classmethod
    def _expand_recipe(cls, data: t.Any) -> t.Any:
        # Explicit keys override the named recipe
        if isinstance(data, dict) and "recipe" in data:
            data = dict(data)
            data = cls.recipe(data.pop("recipe")).model_dump() | data
        return data

    @model_validator(mode="after")
    def _check_milestones(self) -> TrainConfig:
        ms = self.decay_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("decay milestones must be strictly increasing")
        if ms and ms[-1] >= self.epochs:
            raise ValueError("decay milestones must fall before the last epoch")
        return self

    @classmethod
    def recipe(cls, name: str) -> TrainConfig:
        try:
            return RECIPES[name]
        except KeyError:
            raise ValueError(
                f"unknown recipe {name!r}, expected one of {sorted(RECIPES)}"
            ) from None


RECIPES: dict[str, TrainConfig] = {
    "cifar_resnet": TrainConfig(
        epochs=160,
        batch_size=128,
        learning_rate=0.1,
        momentum=0.9,
        lr_decay_factor=10.0,
        decay_milestones=(80, 120),
        weight_decay=5e-4,
    ),
    "imagenet_wrn_dense": TrainConfig(
        epochs=90,
        batch_size=192 * 4,
        learning_rate=0.4,
        momentum=0.9,
        lr_decay_factor=10.0,
        decay_milestones=(30, 60, 80),
        weight_decay=1e-4,
    ),
    "imagenet_wrn_sparse": TrainConfig(
        epochs=100,
        batch_size=192 * 4,
        learning_rate=0.4,
        momentum=0.9,
        lr_decay_factor=10.0,
        decay_milestones=(30, 60, 90),
        weight_decay=1e-4,
    ),
    # CIFAR recipe scaled down, same 10x step structure
    "desk": TrainConfig(),
}


class NetworkSource(_Document):
    """Either an architecture document or a generated family member."""

    path: Path | None = None
    family: t.Literal["mlp", "conv"] | None = None
    width: PositiveInt = 64
    depth: NonNegativeInt = 2

    @model_validator(mode="after")
    def _check_source(self) -> NetworkSource:
        if (self.path is None) == (self.family is None):
            raise ValueError("network needs exactly one of 'path' or 'family'")
        return self


class DatasetSource(_Document):
    kind: t.Literal["gaussian_mixture", "image_grid", "idx", "npz"]
    classes: PositiveInt = 4
    samples: PositiveInt = 2000
    dim: PositiveInt = 8
    image_size: PositiveInt = 8
    channels: PositiveInt = 1
    noise: PositiveFloat | None = None
    seed: NonNegativeInt = 0
    split_seed: NonNegativeInt = 0
    test_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    heldout_classes: NonNegativeInt = 0
    images: Path | None = None
    labels: Path | None = None
    path: Path | None = None

    @model_validator(mode="after")
    def _check_files(self) -> DatasetSource:
        if self.kind == "idx" and (self.images is None or self.labels is None):
            raise ValueError("idx datasets need 'images' and 'labels' files")
        if self.kind == "npz" and self.path is None:
            raise ValueError("npz datasets need a 'path'")
        if self.kind in ("idx", "npz") and self.heldout_classes:
            raise ValueError("held-out classes only exist for synthetic data")
        return self

    @property
    def files(self) -> list[Path]:
        return [p for p in (self.images, self.labels, self.path) if p is not None]


class SparsitySource(_Document):
    method: RatioMethod = "erk"
    sparsity: float = Field(default=0.0, ge=0.0, lt=1.0)
    ratio_file: Path | None = None
    last_density: float = Field(default=1.0, gt=0.0, le=1.0)
    erk_power: PositiveFloat = 1.0
    mask_mode: t.Literal["exact", "bernoulli"] = "exact"
    # GraSP prunes the highest -w*Hg scores unless inverted
    grasp_prune_highest: bool = True
    scoring_batch_size: PositiveInt | None = None

    @model_validator(mode="after")
    def _check_external(self) -> SparsitySource:
        if (self.method == "external") != (self.ratio_file is not None):
            raise ValueError("'ratio_file' is required by, and only by, external")
        return self


class MetricToggles(_Document):
    ece: bool = True
    nll: bool = True
    fgsm: bool = True
    ood: bool = True
    grad_flow: bool = True
    ece_bins: PositiveInt = config.ece_bins
    fgsm_epsilon: NonNegativeFloat = config.fgsm_epsilon
    eval_every: PositiveInt = 1


class ExperimentConfig(_Document):
    name: str
    output_dir: Path
    network: NetworkSource
    dataset: DatasetSource
    sparsity: SparsitySource = SparsitySource()
    # No defaults: every run names its randomness
    mask_seed: NonNegativeInt
    init_seed: NonNegativeInt
    order_seed: NonNegativeInt
    train: TrainConfig = TrainConfig()
    metrics: MetricToggles = MetricToggles()


class SweepSpec(_Document):
    axis: SweepAxis
    values: tuple[float | int | str, ...] = ()
    repeats: PositiveInt = 3
    baseline_repeats: PositiveInt = 1
    workers: PositiveInt = 1

    @model_validator(mode="before")
    @classmethod
    def _default_grid(cls, data: t.Any) -> t.Any:
        if isinstance(data, dict) and data.get("axis") == "sparsity":
            if not data.get("values"):
                data = {**data, "values": config.default_sparsity_grid}
        return data

    @model_validator(mode="after")
    def _check_grid(self) -> SweepSpec:
        values = self.values
        if not values:
            raise ValueError(f"{self.axis} sweep needs a nonempty grid")
        if self.axis in ("depth", "width"):
            if not all(isinstance(v, int) and v > 0 for v in values):
                raise ValueError(f"{self.axis} grid must hold positive integers")
        elif self.axis == "sparsity":
            if not all(
                isinstance(v, (int, float)) and 0 <= v < 1 for v in values
            ):
                raise ValueError("sparsity grid values must lie in [0, 1)")
        elif not all(v in RATIO_METHODS for v in values):
            raise ValueError(f"method grid values must be in {RATIO_METHODS}")
        return self
