"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from ..heads import BoxHeadConfig, MaskHeadConfig
from ..tensor import ConfigurationError

# file key -> dataclass attribute
_KEYS = {
    "seed": "seed",
    "steps": "steps",
    "learning_rate": "learning_rate",
    "momentum": "momentum",
    "weight_decay": "weight_decay",
    "warmup_steps": "warmup_steps",
    "lr_drop_at": "lr_drop_at",
    "images_per_step": "images_per_step",
    "rois_per_image": "rois_per_image",
    "positive_fraction": "positive_fraction",
    "num_scenes": "num_scenes",
    "eval_scenes": "eval_scenes",
    "image_size": "image_size",
    "max_instances": "max_instances",
    "proposal_jitter": "proposal_jitter",
    "proposals_per_gt": "proposals_per_gt",
    "negatives_per_gt": "negatives_per_gt",
    "level_reference": "level_reference",
    "num_classes": "num_classes",
    "pyramid_channels": "pyramid_channels",
    "input.standardize": "input_standardize",
    "backbone.channels": "backbone_channels",
    "backbone.freeze": "backbone_freeze",
    "bpa": "bpa",
    "afp": "afp",
    "ff": "ff",
    "hhd": "hhd",
    "mbn": "mbn",
    "sync_bn.everywhere": "sync_bn_everywhere",
    "box.variant": "box_variant",
    "box.fusion_mode": "box_fusion_mode",
    "box.fusion_placement": "box_fusion_placement",
    "box.hidden_dim": "box_hidden_dim",
    "box.per_level_params": "box_per_level_params",
    "mask.fusion_mode": "mask_fusion_mode",
    "mask.fusion_placement": "mask_fusion_placement",
    "mask.fc_branch_start": "mask_fc_branch_start",
    "mask.fc_fusion_op": "mask_fc_fusion_op",
    "mask.channels": "mask_channels",
    "mask.per_level_params": "mask_per_level_params",
}

ABLATION_SWITCHES = ("bpa", "afp", "ff", "hhd", "mbn")


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_steps: int = 100
    lr_drop_at: float = 0.75
    images_per_step: int = 2
    rois_per_image: int = 64
    positive_fraction: float = 0.25
    num_scenes: int = 500
    eval_scenes: int = 100
    image_size: int = 64
    max_instances: int = 3
    proposal_jitter: float = 0.2
    proposals_per_gt: int = 8
    negatives_per_gt: int = 12
    level_reference: float = 56.0
    num_classes: int = 2
    pyramid_channels: int = 32
    input_standardize: bool = True
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    backbone_freeze: bool = False
    bpa: bool = True
    afp: bool = True
    ff: bool = True
    hhd: bool = True
    mbn: bool = True
    sync_bn_everywhere: bool = False
    box_variant: str = "two_fc"
    box_fusion_mode: str = "max"
    box_fusion_placement: str = "after_fc1"
    box_hidden_dim: int = 128
    box_per_level_params: bool = False
    mask_fusion_mode: str = "max"
    mask_fusion_placement: str = "after_conv1"
    mask_fc_branch_start: str = "conv3"
    mask_fc_fusion_op: str = "sum"
    mask_channels: int = 32
    mask_per_level_params: bool = False

    def __post_init__(self):
        for name in ("steps", "learning_rate", "images_per_step", "rois_per_image", "num_scenes",
                     "image_size", "max_instances", "num_classes", "pyramid_channels"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigurationError("momentum must lie in [0, 1) and weight_decay be non-negative")
        if self.image_size % 32:
            raise ConfigurationError("image_size must be divisible by 32")
        if self.rois_per_image < 4:
            raise ConfigurationError("rois_per_image must be at least 4")
        self.box_config()
        self.mask_config()

    def box_config(self) -> BoxHeadConfig:
        return BoxHeadConfig(
            variant="heavier" if self.hhd else self.box_variant,
            fusion_mode=self.box_fusion_mode,
            fusion_placement=self.box_fusion_placement,
            hidden_dim=self.box_hidden_dim,
            num_classes=self.num_classes,
            conv_channels=self.pyramid_channels,
            per_level_params=self.box_per_level_params,
            norm=self.mbn,
        )

    def mask_config(self) -> MaskHeadConfig:
        return MaskHeadConfig(
            fusion_mode=self.mask_fusion_mode,
            fusion_placement=self.mask_fusion_placement,
            fc_branch=self.ff,
            fc_branch_start=self.mask_fc_branch_start,
            fc_fusion_op=self.mask_fc_fusion_op,
            channels=self.mask_channels,
            num_classes=self.num_classes,
            per_level_params=self.mask_per_level_params,
            norm=self.mbn,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for key, attr in _KEYS.items():
            lines.append(f"{key} = {_format(getattr(self, attr))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls(**parse_overrides(text.splitlines()))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(attr: str, raw: str):
    default = next(f for f in dataclasses.fields(TrainConfig) if f.name == attr).default
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            raise ConfigurationError(f"{attr}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes", "on")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.split(","))
    try:
        return type(default)(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{attr}: cannot parse {raw!r}") from exc


def parse_overrides(lines) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed); unknown keys are rejected."""
    values = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        values[_KEYS[key]] = _parse(_KEYS[key], raw)
    return values
