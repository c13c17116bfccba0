"""Box and mask heads with adaptive-feature-pooling fusion and the fc mask branch."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, ConvTranspose2d, Linear, Module, count_param_layers
from .roi import RoI
from .sync_bn import BNLayer
from .tensor import (
    FUSION_MODES,
    ConfigurationError,
    ContractViolation,
    Tensor,
    broadcast_to,
    concat,
    elementwise_fuse,
    getitem,
    relu,
    reshape,
)

BOX_VARIANTS = ("two_fc", "heavier")
BOX_PLACEMENTS = ("before_fc1", "after_fc1")
MASK_PLACEMENTS = ("before_conv1", "after_conv1")
FC_BRANCH_STARTS = ("conv2", "conv3", "conv4")
MASK_SIZE = 28
DELTA_CLAMP = math.log(1000.0 / 16)


def _check(value, allowed, key):
    if value not in allowed:
        raise ConfigurationError(f"{key} must be one of {allowed}, got {value!r}")


@dataclass
class BoxHeadConfig:
    variant: str = "two_fc"
    fusion_mode: str = "max"
    fusion_placement: str = "after_fc1"
    hidden_dim: int = 128
    num_classes: int = 2
    conv_channels: int = 32
    per_level_params: bool = False
    norm: bool = False

    def __post_init__(self):
        _check(self.variant, BOX_VARIANTS, "box.variant")
        _check(self.fusion_mode, FUSION_MODES, "box.fusion_mode")
        _check(self.fusion_placement, BOX_PLACEMENTS, "box.fusion_placement")


@dataclass
class MaskHeadConfig:
    fusion_mode: str = "max"
    fusion_placement: str = "after_conv1"
    fc_branch: bool = True
    fc_branch_start: str = "conv3"
    fc_fusion_op: str = "sum"
    channels: int = 32
    num_classes: int = 2
    per_level_params: bool = False
    norm: bool = False

    def __post_init__(self):
        _check(self.fusion_mode, FUSION_MODES, "mask.fusion_mode")
        _check(self.fusion_placement, MASK_PLACEMENTS, "mask.fusion_placement")
        _check(self.fc_branch_start, FC_BRANCH_STARTS, "mask.fc_branch_start")
        _check(self.fc_fusion_op, FUSION_MODES, "mask.fc_fusion_op")
        if self.channels % 2:
            raise ConfigurationError("mask channels must be even")


@dataclass
class BoxPrediction:
    class_logits: Tensor
    box_deltas: Tensor


@dataclass
class MaskPrediction:
    per_class_logits: Tensor
    fg_logits: Tensor
    fused_logits: Tensor


def _split_levels(x: Tensor, n: int) -> list[Tensor]:
    r = x.shape[0] // n
    return [getitem(x, slice(i * r, (i + 1) * r)) for i in range(n)]


class _Hidden(Module):
    """A weighted layer followed by optional BN and ReLU."""

    def __init__(self, layer: Module, channels: int, norm: bool):
        self.layer = layer
        self.bn = BNLayer(channels) if norm else None

    def pre(self, x: Tensor) -> Tensor:
        return self.layer(x)

    def post(self, y: Tensor, shards=None) -> Tensor:
        if self.bn is not None:
            y = self.bn(y, shards)
        return relu(y)

    def forward(self, x: Tensor, shards=None) -> Tensor:
        return self.post(self.pre(x), shards)


class _FusedFirstLayer(Module):
    """First parameter layer of a head, applied per level and then fused.

    With ``placement_after`` the layer runs on every level separately (one
    shared parameter set unless ``per_level_params``) and pre-activations are
    fused; otherwise the raw grids are fused first.  A single grid skips fusion.
    """

    def __init__(self, make_layer, channels, norm, mode, placement_after, per_level_params):
        n_sets = 4 if (per_level_params and placement_after) else 1
        self.units = [_Hidden(make_layer(), channels, norm) for _ in range(n_sets)]
        self.mode = mode
        self.placement_after = placement_after

    def level_outputs(self, grids: list[Tensor], prep) -> list[Tensor]:
        """Per-level pre-activation outputs of the first layer."""
        if len(self.units) == 1:
            stacked = self.units[0].pre(prep(concat(grids, axis=0)))
            return _split_levels(stacked, len(grids))
        return [unit.pre(prep(g)) for unit, g in zip(self.units, grids)]

    def forward(self, grids: list[Tensor], prep, shards=None) -> Tensor:
        unit = self.units[0]
        if len(grids) == 1:
            return unit.post(unit.pre(prep(grids[0])), shards)
        if self.placement_after:
            fused = elementwise_fuse(self.level_outputs(grids, prep), self.mode)
        else:
            fused = unit.pre(prep(elementwise_fuse(grids, self.mode)))
        return unit.post(fused, shards)


def _flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def _identity(x: Tensor) -> Tensor:
    return x


class BoxHead(Module):
    def __init__(self, cfg: BoxHeadConfig, in_channels: int, pool: int, rng: np.random.Generator):
        self.cfg = cfg
        after = cfg.fusion_placement == "after_fc1"
        k = cfg.num_classes
        if cfg.variant == "two_fc":
            din = in_channels * pool * pool
            self.first = _FusedFirstLayer(
                lambda: Linear(din, cfg.hidden_dim, rng), cfg.hidden_dim, cfg.norm, cfg.fusion_mode, after, cfg.per_level_params
            )
            self.rest = [_Hidden(Linear(cfg.hidden_dim, cfg.hidden_dim, rng), cfg.hidden_dim, cfg.norm)]
            self._prep = _flatten
        else:
            c = cfg.conv_channels
            self.first = _FusedFirstLayer(
                lambda: Conv2d(in_channels, c, 3, rng), c, cfg.norm, cfg.fusion_mode, after, cfg.per_level_params
            )
            self.convs = [_Hidden(Conv2d(c, c, 3, rng), c, cfg.norm) for _ in range(3)]
            self.rest = [_Hidden(Linear(c * pool * pool, cfg.hidden_dim, rng), cfg.hidden_dim, cfg.norm)]
            self._prep = _identity
        self.cls = Linear(cfg.hidden_dim, k + 1, rng, std=0.01)
        self.box = Linear(cfg.hidden_dim, 4 * k, rng, std=0.001)

    def num_convs(self) -> int:
        """3x3 convs before the predictors (4 for the heavier variant, else 0)."""
        if self.cfg.variant != "heavier":
            return 0
        return 1 + len(self.convs)

    def first_layer_levels(self, grids: list[Tensor]) -> list[Tensor]:
        return self.first.level_outputs(grids, self._prep)

    def forward(self, grids: list[Tensor], shards=None) -> BoxPrediction:
        if len(grids) not in (1, 4):
            raise ContractViolation("box head takes one grid or one per level")
        x = self.first(grids, self._prep, shards)
        if self.cfg.variant == "heavier":
            for conv in self.convs:
                x = conv(x, shards)
            x = _flatten(x)
        for layer in self.rest:
            x = layer(x, shards)
        return BoxPrediction(self.cls(x), self.box(x))


class MaskHead(Module):
    def __init__(self, cfg: MaskHeadConfig, in_channels: int, rng: np.random.Generator, pool: int = 14):
        self.cfg = cfg
        c = cfg.channels
        after = cfg.fusion_placement == "after_conv1"
        self.first = _FusedFirstLayer(
            lambda: Conv2d(in_channels, c, 3, rng), c, cfg.norm, cfg.fusion_mode, after, cfg.per_level_params
        )
        self.convs = [_Hidden(Conv2d(c, c, 3, rng), c, cfg.norm) for _ in range(3)]
        self.deconv = ConvTranspose2d(c, c, rng)
        self.predictor = Conv2d(c, cfg.num_classes, 1, rng, std=0.01)
        if cfg.fc_branch:
            self.fc_convs = [
                _Hidden(Conv2d(c, c, 3, rng), c, cfg.norm),
                _Hidden(Conv2d(c, c // 2, 3, rng), c // 2, cfg.norm),
            ]
            self.fc = Linear((c // 2) * pool * pool, MASK_SIZE * MASK_SIZE, rng, std=0.001)

    def main_path_layers(self) -> tuple[int, int]:
        """(convs, deconvs) on the FCN path, excluding the 1x1 predictor."""
        return 1 + len(self.convs), 1

    def forward(self, grids: list[Tensor], shards=None) -> MaskPrediction:
        if len(grids) not in (1, 4):
            raise ContractViolation("mask head takes one grid or one per level")
        taps = {}
        x = self.first(grids, _identity, shards)
        for i, conv in enumerate(self.convs, start=2):
            x = conv(x, shards)
            taps[f"conv{i}"] = x
        per_class = self.predictor(relu(self.deconv(x)))
        r, k = per_class.shape[0], self.cfg.num_classes
        if not self.cfg.fc_branch:
            fg = Tensor(np.zeros((r, 1, MASK_SIZE, MASK_SIZE)))
            return MaskPrediction(per_class, fg, per_class)
        y = taps[self.cfg.fc_branch_start]
        for conv in self.fc_convs:
            y = conv(y, shards)
        fg = reshape(self.fc(_flatten(y)), (r, 1, MASK_SIZE, MASK_SIZE))
        fused = elementwise_fuse(
            [per_class, broadcast_to(fg, (r, k, MASK_SIZE, MASK_SIZE))], self.cfg.fc_fusion_op
        )
        return MaskPrediction(per_class, fg, fused)


def box_head_forward(grids, head: BoxHead, shards=None) -> BoxPrediction:
    """Accepts a PooledGrid or a list of per-level (R, C, 7, 7) tensors."""
    return head(_grid_list(grids), shards)


def mask_head_forward(grids, head: MaskHead, shards=None) -> MaskPrediction:
    return head(_grid_list(grids), shards)


def _grid_list(grids) -> list[Tensor]:
    if hasattr(grids, "per_level"):
        return [reshape(g, (1,) + g.shape) for _, g in sorted(grids.per_level.items())]
    return list(grids)


# ---------------------------------------------------------------------------
# box parameterization


def encode_boxes(gt: np.ndarray, rois: np.ndarray) -> np.ndarray:
    """Deltas (dx, dy, dw, dh) that map each roi onto its gt box."""
    gt = np.asarray(gt, dtype=float).reshape(-1, 4)
    rois = np.asarray(rois, dtype=float).reshape(-1, 4)
    rw, rh = rois[:, 2] - rois[:, 0], rois[:, 3] - rois[:, 1]
    rx, ry = rois[:, 0] + 0.5 * rw, rois[:, 1] + 0.5 * rh
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    gx, gy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
    return np.stack([(gx - rx) / rw, (gy - ry) / rh, np.log(gw / rw), np.log(gh / rh)], axis=1)


def decode_boxes(rois: np.ndarray, deltas: np.ndarray, clip_to: tuple[float, float] | None = None) -> np.ndarray:
    rois = np.asarray(rois, dtype=float).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=float).reshape(-1, 4)
    rw, rh = rois[:, 2] - rois[:, 0], rois[:, 3] - rois[:, 1]
    cx = rois[:, 0] + 0.5 * rw + deltas[:, 0] * rw
    cy = rois[:, 1] + 0.5 * rh + deltas[:, 1] * rh
    w = rw * np.exp(np.minimum(deltas[:, 2], DELTA_CLAMP))
    h = rh * np.exp(np.minimum(deltas[:, 3], DELTA_CLAMP))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if clip_to is not None:
        width, height = clip_to
        out[:, [0, 2]] = out[:, [0, 2]].clip(0.0, width)
        out[:, [1, 3]] = out[:, [1, 3]].clip(0.0, height)
        min_side = 1e-3
        out[:, 2] = np.maximum(out[:, 2], np.minimum(out[:, 0] + min_side, width))
        out[:, 0] = np.minimum(out[:, 0], out[:, 2] - min_side)
        out[:, 3] = np.maximum(out[:, 3], np.minimum(out[:, 1] + min_side, height))
        out[:, 1] = np.minimum(out[:, 1], out[:, 3] - min_side)
    return out


def decode_box_deltas(roi: RoI, deltas, clip_to: tuple[float, float] | None = None) -> RoI:
    if not np.all(np.isfinite(deltas)):
        raise ContractViolation("decode_box_deltas: non-finite deltas")
    x0, y0, x1, y1 = decode_boxes(roi.as_array(), deltas, clip_to)[0]
    return RoI(float(x0), float(y0), float(x1), float(y1))


__all__ = [
    "BoxHead",
    "BoxHeadConfig",
    "BoxPrediction",
    "MaskHead",
    "MaskHeadConfig",
    "MaskPrediction",
    "box_head_forward",
    "count_param_layers",
    "decode_box_deltas",
    "decode_boxes",
    "encode_boxes",
    "mask_head_forward",
]
