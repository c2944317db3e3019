"""Pydantic models for configuration and machine-readable reports."""
from __future__ import annotations

import math
from typing import Any, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class TrainConfig(BaseModel):
    """Everything a training, audit or sweep run depends on."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # schedule / sampler
    steps: int = Field(default=3, ge=1, le=12, description="샘플링 단계 수 T")
    init: Literal["backproj", "noise"] = "backproj"
    # operator
    block_size: int = Field(default=8, ge=1)
    ratio: float = Field(default=0.25, gt=0, le=1)
    # estimator
    image_channels: int = Field(default=1, description="1 (grayscale) or 3 (RGB)")
    channels: List[int] = Field(default_factory=lambda: [16, 32], min_length=1)
    blocks_per_group: int = Field(default=2, ge=1)
    expansion: int = Field(default=4, ge=1)
    attention: bool = False
    # optimisation
    batch_size: int = Field(default=4, gt=0)
    patch_size: int = Field(default=64, gt=0)
    lr: float = Field(default=1e-4, ge=0)
    lr_halving: int = Field(default=10000, gt=0)
    iterations: int = Field(default=2000, gt=0)
    grad_clip: float = Field(default=1.0, gt=0)
    seed: int = Field(default=0, ge=0)
    # ablation axes
    e2e: bool = True
    invertible: bool = True
    injectors: bool = True
    reuse: bool = False
    pruning: bool = False
    wiring_levels: int = Field(default=2, ge=1, le=2)
    precision: Literal["float32", "float64"] = "float32"
    # data / bookkeeping
    train_images: int = Field(default=64, gt=0, description="합성 텍스처 개수")
    val_patches: int = Field(default=8, gt=0)
    val_every: int = Field(default=100, gt=0)
    log_every: int = Field(default=50, gt=0)
    workers: int = Field(default=1, ge=1)
    data_dir: Optional[str] = None
    out_dir: str = "runs/default"

    @field_validator("channels", mode="before")
    @classmethod
    def _split_channels(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [int(part) for part in value.replace(" ", "").split(",") if part]
        return value

    @field_validator("image_channels")
    @classmethod
    def _image_channels(cls, value: int) -> int:
        if value not in (1, 3):
            raise ValueError("image_channels must be 1 or 3")
        return value

    @field_validator("channels")
    @classmethod
    def _positive_channels(cls, value: List[int]) -> List[int]:
        if any(c <= 0 for c in value):
            raise ValueError("channel widths must be positive")
        return value

    @model_validator(mode="after")
    def _coherent_flags(self) -> "TrainConfig":
        if self.reuse:
            raise ValueError("reuse of pre-trained weights is out of scope at desk scale")
        if self.pruning:
            raise ValueError("pruning is out of scope at desk scale")
        if self.invertible and not self.e2e:
            raise ValueError("invertible requires e2e")
        if self.patch_size % self.block_size:
            raise ValueError(f"patch_size {self.patch_size} is not divisible by block_size {self.block_size}")
        step = 2 ** (len(self.channels) - 1)
        if self.patch_size % step:
            raise ValueError(f"patch_size {self.patch_size} is not divisible by {step}")
        if math.floor(self.ratio * self.block_size ** 2 + 0.5) < 1:
            raise ValueError(f"ratio {self.ratio} gives no measurements for block size {self.block_size}")
        return self


class AuditGroup(BaseModel):
    group: str
    parameters: int
    max_rel_deviation: float


class AuditReport(BaseModel):
    precision: str
    steps: int
    tolerance: float
    passed: bool
    groups: List[AuditGroup]
    loss_cached: float
    loss_recompute: float


class SweepRow(BaseModel):
    T: int
    cached_peak_bytes: int
    recompute_peak_bytes: int
    reduction_pct: float
    cached_retained_bytes: int
    recompute_retained_bytes: int


class SweepReport(BaseModel):
    wiring_levels: int
    rows: List[SweepRow]
    slope: float
    intercept: float
    r_squared: float
    step_component_reduction_pct: Optional[float] = None
    recompute_spread_pct: float = 0.0

