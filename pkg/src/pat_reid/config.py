"""Run configuration: pydantic models, package defaults, JSON helpers."""

from __future__ import annotations

import json
from pathlib import Path

from pydantic import BaseModel, Field, model_validator

RGB = tuple[float, float, float]

# Saturated, mutually distant colors; domain "b" shifts every channel.
_PALETTE_A: list[RGB] = [
    (0.85, 0.10, 0.10),
    (0.10, 0.70, 0.15),
    (0.15, 0.25, 0.85),
    (0.85, 0.80, 0.10),
    (0.75, 0.10, 0.70),
    (0.10, 0.70, 0.75),
    (0.90, 0.50, 0.10),
    (0.80, 0.80, 0.80),
]
_PALETTE_B: list[RGB] = [
    (0.65, 0.20, 0.25),
    (0.25, 0.55, 0.30),
    (0.30, 0.35, 0.65),
    (0.70, 0.65, 0.30),
    (0.60, 0.25, 0.55),
    (0.25, 0.55, 0.60),
    (0.75, 0.45, 0.25),
    (0.60, 0.65, 0.70),
]


class ModelConfig(BaseModel):
    """Encoder geometry and capacity."""

    image_h: int = 64
    image_w: int = 32
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    heads: int = 4
    blocks: int = 4
    num_parts: int = 3
    num_classes: int = 20
    mlp_ratio: int = 4

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValueError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")
        if self.num_parts < 1:
            raise ValueError("num_parts must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        return self

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1 + self.num_parts


class CslConfig(BaseModel):
    """Memory-bank neighbor mining and clustering loss."""

    tau: float = Field(0.02, gt=0.0)
    k: int = Field(10, ge=1)
    momentum: float = Field(0.2, gt=0.0, le=1.0)


class PsdConfig(BaseModel):
    """Soft-label distillation mixing weights."""

    alpha: float = Field(0.5, ge=0.0, lt=1.0)
    lam: float = Field(0.5, ge=0.0, le=1.0)
    smoothing: float = Field(0.1, ge=0.0, lt=1.0)


class TrainConfig(BaseModel):
    """Optimizer, schedule, batch composition, and ablation switches."""

    epochs: int = Field(60, ge=1)
    warmup_epochs: int = Field(10, ge=0)
    peak_lr: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    sgd_momentum: float = Field(0.9, ge=0.0, lt=1.0)
    p: int = Field(16, ge=2)
    k_per_id: int = Field(4, ge=2)
    seed: int = 0
    use_csl: bool = True
    use_psd: bool = True
    checkpoint_every: int = Field(0, ge=0)

    @property
    def batch_size(self) -> int:
        return self.p * self.k_per_id


class DomainConfig(BaseModel):
    """Appearance distribution for one synthetic camera network."""

    name: str = "a"
    palette: list[RGB] = Field(default_factory=lambda: list(_PALETTE_A))
    background: tuple[float, float] = (0.08, 0.18)
    noise_sigma: float = Field(0.02, ge=0.0)
    gain: tuple[float, float] = (0.9, 1.1)
    cameras: int = Field(4, ge=2)

    @model_validator(mode="after")
    def _check(self) -> "DomainConfig":
        if not self.palette:
            raise ValueError("palette must be non-empty")
        if self.background[0] > self.background[1] or self.gain[0] > self.gain[1]:
            raise ValueError("background/gain ranges must be (low, high)")
        return self


def default_domain_b() -> DomainConfig:
    return DomainConfig(
        name="b",
        palette=list(_PALETTE_B),
        background=(0.30, 0.45),
        noise_sigma=0.05,
        gain=(0.7, 1.0),
        cameras=4,
    )


class DataConfig(BaseModel):
    num_ids: int = Field(20, ge=2)
    images_per_id: int = Field(8, ge=2)
    domain_a: DomainConfig = Field(default_factory=DomainConfig)
    domain_b: DomainConfig = Field(default_factory=default_domain_b)


class RunConfig(BaseModel):
    model: ModelConfig = Field(default_factory=ModelConfig)
    csl: CslConfig = Field(default_factory=CslConfig)
    psd: PsdConfig = Field(default_factory=PsdConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2)


def load_run_config(path: str | Path) -> RunConfig:
    return RunConfig.model_validate_json(Path(path).read_text())


def save_run_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(config.to_json() + "\n")
