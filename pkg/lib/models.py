"""Data models for geos."""

from __future__ import annotations

import math
from datetime import datetime
from pathlib import Path
from typing import Any, Literal

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from lib.errors import GeometryError

Mode = Literal["dg", "da", "pda", "null_hypothesis"]
Task = Literal["jigsaw", "rotation"]
OptimizerName = Literal["sgd_momentum", "adam"]
ProtocolName = Literal["dg_loo", "da_multi", "pda_pairs"]
Method = Literal["null", "ges", "geos", "ges_rotation", "geos_rotation"]
RowStatus = Literal["ok", "failed"]

RGB = tuple[int, int, int]
DeskChannels = tuple[int, int, int, int]

ROTATION_CLASSES = 4
_FRAME_COLUMNS = ("target", "source", "method", "os_iterations", "run", "accuracy")


class AugmentConfig(BaseModel):
    """Shared augmentation pipeline for ordered and self-supervised images."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    crop_size: int = Field(222, ge=1, description="Output side in pixels")
    flip_probability: float = Field(0.5, ge=0.0, le=1.0)
    photometric_strength: float = Field(0.4, ge=0.0, le=1.0)
    crop_scale_min: float = Field(0.8, gt=0.0, le=1.0, description="Smallest crop area fraction")
    enabled: bool = True

    def check_grid(self, side: int) -> None:
        """Tiles must be equal squares."""
        if self.crop_size % side:
            msg = f"crop size {self.crop_size} is not divisible by grid side {side}"
            raise GeometryError(msg)


class ModelConfig(BaseModel):
    """Architecture of a GeS network."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    backbone: str = Field("desk_cnn", description="Backbone profile: desk_cnn or resnet18")
    num_classes: int = Field(..., ge=1)
    num_pretext: int = Field(..., ge=1)
    isolation: bool = True
    seed: int = 0
    input_size: int = Field(66, ge=1)
    in_channels: int = Field(3, ge=1)
    desk_channels: DeskChannels = (16, 32, 64, 64)
    zero_init_refine: bool = True
    aux_norm: bool | None = Field(None, description="Batch norm inside the auxiliary block")
    pretrained: Path | None = None


class TrainConfig(BaseModel):
    """Every optimizer, loss-weight, schedule and mode setting of a training run."""

    model_config = ConfigDict(extra="forbid")

    mode: Mode = "dg"
    task: Task = "jigsaw"
    alpha: float = Field(2.0, ge=0.0, description="Auxiliary loss weight")
    optimizer: OptimizerName = "sgd_momentum"
    lr_main: float = Field(0.001, ge=0.0)
    lr_head: float = Field(0.001, ge=0.0)
    momentum: float = Field(0.9, ge=0.0)
    weight_decay: float = Field(0.0005, ge=0.0)
    epochs: int = Field(40, ge=1)
    batch_size_primary: int = Field(128, ge=1)
    batch_size_auxiliary: int = Field(128, ge=1)
    lr_decay_factor: float = Field(1.0, ge=1.0)
    lr_decay_at_epoch: int | None = Field(None, ge=1)
    seed: int = 0
    val_fraction: float = Field(0.1, gt=0.0, lt=1.0)

    backbone: str = "resnet18"
    resolution: int = Field(222, ge=1)
    grid_side: int = Field(3, ge=1)
    num_permutations: int = Field(30, ge=1)
    desk_channels: DeskChannels = (16, 32, 64, 64)
    zero_init_refine: bool = True
    pretrained: Path | None = None
    train_list: Path | None = Field(None, description="Official train split, one ref per line")
    val_list: Path | None = Field(None, description="Official validation split")

    augment: bool = True
    flip_probability: float = Field(0.5, ge=0.0, le=1.0)
    photometric_strength: float = Field(0.4, ge=0.0, le=1.0)
    crop_scale_min: float = Field(0.8, gt=0.0, le=1.0)

    loader_workers: int = Field(0, ge=0)
    eval_batch_size: int = Field(256, ge=1)
    audit_isolation: bool = False

    @model_validator(mode="after")
    def _check_geometry(self) -> TrainConfig:
        if self.task == "jigsaw" and self.resolution % self.grid_side:
            msg = f"resolution {self.resolution} is not divisible by grid side {self.grid_side}"
            raise ValueError(msg)
        if (self.train_list is None) != (self.val_list is None):
            msg = "train_list and val_list must be given together"
            raise ValueError(msg)
        return self

    @property
    def isolation(self) -> bool:
        """The null hypothesis is the only mode with gradients crossing the block."""
        return self.mode != "null_hypothesis"

    @property
    def uses_auxiliary(self) -> bool:
        """Whether the auxiliary loss takes part in training."""
        return self.mode != "null_hypothesis"

    def augment_config(self) -> AugmentConfig:
        """Augmentation settings at this run's input size."""
        return AugmentConfig(
            crop_size=self.resolution,
            flip_probability=self.flip_probability,
            photometric_strength=self.photometric_strength,
            crop_scale_min=self.crop_scale_min,
            enabled=self.augment,
        )

    def network_config(self, num_classes: int, num_pretext: int) -> ModelConfig:
        """Architecture for this run."""
        return ModelConfig(
            backbone=self.backbone,
            num_classes=num_classes,
            num_pretext=num_pretext,
            isolation=self.isolation,
            seed=self.seed,
            input_size=self.resolution,
            desk_channels=self.desk_channels,
            zero_init_refine=self.zero_init_refine,
            pretrained=self.pretrained,
        )


class OSConfig(BaseModel):
    """One-sample adaptation settings; unset values inherit the training values."""

    model_config = ConfigDict(extra="forbid")

    iterations: int = Field(3, ge=0)
    batch_size: int = Field(128, ge=1)
    task: Task | None = None
    optimizer: OptimizerName | None = None
    lr: float | None = Field(None, ge=0.0)
    lr_head: float | None = Field(None, ge=0.0)
    momentum: float | None = Field(None, ge=0.0)
    weight_decay: float | None = Field(None, ge=0.0)
    alpha: float | None = Field(None, ge=0.0)
    augment: AugmentConfig | None = None
    seed: int = 0
    restart_per_k: bool = False
    jobs: int = Field(1, ge=1)

    def resolve(self, train: TrainConfig) -> OSConfig:
        """Fill every unset hyperparameter from the training configuration."""
        return self.model_copy(
            update={
                "task": self.task or train.task,
                "optimizer": self.optimizer or train.optimizer,
                "lr": train.lr_main if self.lr is None else self.lr,
                "lr_head": train.lr_head if self.lr_head is None else self.lr_head,
                "momentum": train.momentum if self.momentum is None else self.momentum,
                "weight_decay": (
                    train.weight_decay if self.weight_decay is None else self.weight_decay
                ),
                "alpha": train.alpha if self.alpha is None else self.alpha,
                "augment": self.augment or train.augment_config(),
            }
        )


class OSTrace(BaseModel):
    """What happened while adapting to one test sample.

    Loss lists are indexed by step: entry k belongs to the self-supervised
    batch drawn for step k.
    """

    sample_id: str
    aux_losses: list[float] = Field(default_factory=list, description="Loss before each step")
    post_losses: list[float] = Field(
        default_factory=list, description="Loss on the same batch after each step"
    )
    baseline_losses: list[float] = Field(
        default_factory=list, description="Loss of the unadapted Λ on each step's batch"
    )
    predictions: list[int] = Field(default_factory=list, description="Class after k steps")
    pre_logits: list[float] = Field(default_factory=list)
    post_logits: list[float] = Field(default_factory=list)
    pre_class: int = -1
    post_class: int = -1
    lambda_restored: bool = False

    @property
    def made_progress(self) -> bool:
        """Whether the adapted Λ beats the unadapted one on the last step's batch."""
        if not self.post_losses or len(self.baseline_losses) != len(self.post_losses):
            return False
        return self.post_losses[-1] < self.baseline_losses[-1]


class DomainStyle(BaseModel):
    """Rendering knobs that make one synthetic domain look different from another."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    background: RGB
    foreground: RGB
    texture_frequency: float = Field(0.0, ge=0.0)
    stroke_width: int = Field(0, ge=0, description="0 draws filled shapes")


class SynthSpec(BaseModel):
    """Recipe for a deterministic multi-domain toy dataset."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    num_domains: int = Field(4, ge=1)
    num_classes: int = Field(7, ge=2, le=7)
    samples_per_domain_class: int = Field(50, ge=1)
    resolution: int = Field(66, ge=8)
    seed: int = 7
    grid_side: int = Field(3, ge=1)
    shift_knobs: list[DomainStyle] | None = None

    @model_validator(mode="after")
    def _check(self) -> SynthSpec:
        if self.resolution % self.grid_side:
            msg = f"resolution {self.resolution} is not divisible by grid side {self.grid_side}"
            raise ValueError(msg)
        if self.shift_knobs is not None and len(self.shift_knobs) != self.num_domains:
            msg = "shift_knobs needs one style per domain"
            raise ValueError(msg)
        return self


class EpochRecord(BaseModel):
    """One row of the training log."""

    epoch: int
    loss_primary: float
    loss_auxiliary: float
    val_metric: float
    lr: float


class ProtocolSpec(BaseModel):
    """Which protocol to run, how often and with which methods."""

    model_config = ConfigDict(extra="forbid")

    protocol: ProtocolName
    repetitions: int = Field(3, ge=1)
    methods: list[Method] = Field(default_factory=lambda: ["ges", "geos"])
    os_max_iterations: int = Field(3, ge=0)
    rotation_os_iterations: int = Field(1, ge=0)
    os_batch_size: int = Field(128, ge=1)
    full_sweep: bool = False
    max_pairs: int = Field(6, ge=1, description="Pairs kept without a full sweep")
    seed: int = 0
    jobs: int = Field(1, ge=1)
    train: TrainConfig = Field(default_factory=TrainConfig)


class ProtocolRow(BaseModel):
    """One accuracy measurement."""

    protocol: ProtocolName
    target: str
    source: str | None = Field(None, description="Labeled source of a pda pair")
    method: Method
    os_iterations: int
    run: int
    seed: int
    accuracy: float | None = None
    status: RowStatus = "ok"

    @model_validator(mode="after")
    def _check(self) -> ProtocolRow:
        if self.status == "ok" and (self.accuracy is None or not math.isfinite(self.accuracy)):
            msg = "ok rows need a finite accuracy"
            raise ValueError(msg)
        return self


class ReferenceRow(BaseModel):
    """A published accuracy entered for comparison, never computed here."""

    label: str
    protocol: ProtocolName
    target: str
    accuracy: float
    note: str = ""


class Aggregate(BaseModel):
    """Mean accuracy of one (method, iteration count) per target and overall."""

    method: Method
    os_iterations: int
    per_target: dict[str, float]
    average: float

    @property
    def label(self) -> str:
        if self.method.startswith("geos"):
            return f"{self.method} it={self.os_iterations}"
        return self.method


class ProtocolResult(BaseModel):
    """Rows of one protocol run plus the audits performed while producing them."""

    protocol: ProtocolName
    rows: list[ProtocolRow] = Field(default_factory=list)
    audits: list[str] = Field(default_factory=list)
    references: list[ReferenceRow] = Field(default_factory=list)

    @property
    def failed(self) -> bool:
        """Whether any cell failed."""
        return any(row.status == "failed" for row in self.rows)

    @property
    def targets(self) -> list[str]:
        return list(dict.fromkeys(row.target for row in self.rows))

    def ok_frame(self) -> pd.DataFrame:
        """Rows with an accuracy as a frame, in row order; failed rows are dropped."""
        records = [
            row.model_dump(include=set(_FRAME_COLUMNS))
            for row in self.rows
            if row.status == "ok" and row.accuracy is not None
        ]
        return pd.DataFrame(records, columns=list(_FRAME_COLUMNS))

    def aggregate(self) -> list[Aggregate]:
        """Per-target mean over runs, then the mean of the per-target means.

        Failed rows are left out; a (method, iteration) with no ok row is omitted.
        """
        frame = self.ok_frame()
        if frame.empty:
            return []
        per_target = frame.groupby(["method", "os_iterations", "target"], sort=False)[
            "accuracy"
        ].mean()
        aggregates = []
        for (method, k), means in per_target.groupby(level=[0, 1], sort=False):
            aggregates.append(
                Aggregate(
                    method=method,
                    os_iterations=int(k),
                    per_target={str(t): float(v) for (_, _, t), v in means.items()},
                    average=float(means.mean()),
                )
            )
        return aggregates


class CheckpointMetadata(BaseModel):
    """Everything needed to rebuild and audit a trained network."""

    network: ModelConfig
    train: TrainConfig
    config_hash: str
    seed: int
    isolation: bool
    mode: Mode
    task: Task
    class_names: list[str]
    sources: list[str] = Field(default_factory=list)
    target: str | None = None
    permutations: list[list[int]] | None = None
    permutation_seed: int | None = None
    permutation_hash: str | None = None
    best_epoch: int | None = None
    best_val_metric: float | None = None


class RunManifest(BaseModel):
    """Record written before a command does any work."""

    command: str
    created_at: datetime
    root_seed: int
    options: dict[str, Any] = Field(default_factory=dict)
    config: dict[str, Any] = Field(default_factory=dict)
    seeds: dict[str, int] = Field(default_factory=dict)
    inputs: dict[str, str] = Field(default_factory=dict, description="path -> sha256")
    context: dict[str, str | None] = Field(default_factory=dict)
