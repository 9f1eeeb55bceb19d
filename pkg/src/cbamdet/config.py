"""Flat-key run configuration: YAML file plus command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .model import ModelConfig
from .trainer import HyperParams


@dataclass
class RunConfig:
    """Every knob of the pipeline as one flat namespace.

    Unknown keys are rejected up front so a typo cannot silently fall back
    to a default.
    """

    # model
    num_classes: int = 1
    input_size: int = 160
    widths: tuple = (16, 32, 64)
    cbam: bool = True
    cbam_reduction: int = 16
    cbam_spatial_kernel: int = 7
    # training
    lr0: float = 0.0032
    lrf: float = 0.12
    batch_size: int = 16
    warmup_epochs: float = 2.0
    warmup_bias_lr: float = 0.05
    epochs: int = 100
    momentum: float = 0.937
    weight_decay: float = 0.0005
    final_lr_absolute: bool = False
    # synthesis
    n_images: int = 50
    image_size: int = 160
    birds_min: int = 1
    birds_max: int = 4
    bird_scale_min: float = 0.05
    bird_scale_max: float = 0.25
    clutter_level: float = 0.3
    # inference
    conf_thresh: float = 0.25
    iou_thresh: float = 0.45
    # plumbing
    data_dir: str = "data"
    out_dir: str = "runs"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.widths, list):
            self.widths = tuple(self.widths)
        # constructing the sub-configs runs their validation
        self.model_config()
        self.hyper_params()
        self.synth_config()
        if not 0.0 <= self.conf_thresh < 1.0:
            raise ValueError(f"conf_thresh {self.conf_thresh} outside [0, 1)")
        if not 0.0 < self.iou_thresh < 1.0:
            raise ValueError(f"iou_thresh {self.iou_thresh} outside (0, 1)")
        if self.n_images < 3:
            raise ValueError(f"n_images {self.n_images} is below the minimum of 3")
        if self.threads < 1:
            raise ValueError(f"threads {self.threads} must be at least 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_classes=self.num_classes,
            input_size=self.input_size,
            widths=tuple(self.widths),
            cbam_enabled=self.cbam,
            cbam_reduction=self.cbam_reduction,
            cbam_spatial_kernel=self.cbam_spatial_kernel,
        )

    def hyper_params(self) -> HyperParams:
        return HyperParams(
            lr0=self.lr0,
            lrf=self.lrf,
            batch_size=self.batch_size,
            warmup_epochs=self.warmup_epochs,
            warmup_bias_lr=self.warmup_bias_lr,
            epochs=self.epochs,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.seed,
            final_lr_absolute=self.final_lr_absolute,
        )

    def synth_config(self):
        from .dataio import SynthSceneConfig

        return SynthSceneConfig(
            image_size=self.image_size,
            birds_per_image=(self.birds_min, self.birds_max),
            bird_scale=(self.bird_scale_min, self.bird_scale_max),
            clutter_level=self.clutter_level,
            seed=self.seed,
        )


def config_keys() -> list:
    return [f.name for f in fields(RunConfig)]


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional YAML file and override mapping.

    The file must be a flat mapping; overrides (typically parsed flags)
    win over file values, which win over defaults.
    """
    data = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ValueError(f"config {path} must be a flat key: value mapping")
        data.update(raw)
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    known = set(config_keys())
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    return RunConfig(**data)
