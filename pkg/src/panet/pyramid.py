"""Tiny backbone, top-down feature pyramid and the bottom-up augmented path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Conv2d, Module, count_param_layers
from .sync_bn import BNLayer
from .tensor import ContractViolation, Tensor, add, relu

LEVELS = (2, 3, 4, 5)
STRIDES = {2: 4, 3: 8, 4: 16, 5: 32}


class _Levels:
    prefix = ""

    def __getitem__(self, level: int) -> Tensor:
        return getattr(self, f"{self.prefix}{level}")

    def as_list(self) -> list[Tensor]:
        return [self[k] for k in LEVELS]


@dataclass
class BackboneStages(_Levels):
    c2: Tensor
    c3: Tensor
    c4: Tensor
    c5: Tensor
    prefix = "c"


@dataclass
class FeaturePyramid(_Levels):
    p2: Tensor
    p3: Tensor
    p4: Tensor
    p5: Tensor
    prefix = "p"


@dataclass
class AugmentedPyramid(_Levels):
    n2: Tensor
    n3: Tensor
    n4: Tensor
    n5: Tensor
    prefix = "n"


class ConvUnit(Module):
    """conv -> optional synchronized BN -> optional ReLU."""

    def __init__(self, cin, cout, k, rng, stride=1, norm=False, act=True):
        self.conv = Conv2d(cin, cout, k, rng, stride=stride)
        self.bn = BNLayer(cout) if norm else None
        self.act = act

    def forward(self, x: Tensor, shards=None) -> Tensor:
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y, shards)
        return relu(y) if self.act else y


class Backbone(Module):
    """Stem conv (stride 2) then four stages of two 3x3 convs, the first strided."""

    def __init__(self, channels, rng: np.random.Generator, norm: bool = False):
        if len(channels) != 4:
            raise ContractViolation("backbone needs four stage widths")
        self.channels = list(channels)
        self.stem = ConvUnit(3, channels[0], 3, rng, stride=2, norm=norm)
        self.stages = []
        cin = channels[0]
        for cout in channels:
            first = ConvUnit(cin, cout, 3, rng, stride=2, norm=norm)
            self.stages.append(_Stage(first, ConvUnit(cout, cout, 3, rng, norm=norm)))
            cin = cout

    def forward(self, image: Tensor, shards=None) -> BackboneStages:
        _, _, h, w = image.shape
        if h % 32 or w % 32:
            raise ContractViolation(f"image size {h}x{w} must be divisible by 32")
        x = self.stem(image, shards)
        outs = []
        for stage in self.stages:
            x = stage(x, shards)
            outs.append(x)
        return BackboneStages(*outs)

    def stage_depth(self) -> int:
        return count_param_layers(self.stages[0])


class _Stage(Module):
    def __init__(self, first: ConvUnit, second: ConvUnit):
        self.first = first
        self.second = second

    def forward(self, x, shards=None):
        return self.second(self.first(x, shards), shards)


def build_backbone(image: Tensor, channels, rng: np.random.Generator, norm: bool = False) -> BackboneStages:
    """One-shot helper: build a fresh backbone and run it on ``image``."""
    return Backbone(channels, rng, norm)(image)


class TopDown(Module):
    """FPN top-down path: 1x1 laterals, nearest x2 upsampling, 3x3 smoothing."""

    def __init__(self, in_channels, pyramid_channels: int, rng: np.random.Generator, norm: bool = False):
        self.pyramid_channels = pyramid_channels
        self.lateral = [ConvUnit(c, pyramid_channels, 1, rng, norm=norm, act=False) for c in in_channels]
        # smoothing for P2, P3, P4
        self.smooth = [ConvUnit(pyramid_channels, pyramid_channels, 3, rng, norm=norm, act=False) for _ in range(3)]

    def forward(self, stages: BackboneStages, shards=None) -> FeaturePyramid:
        cs = stages.as_list()
        p = [None] * 4
        top = self.lateral[3](cs[3], shards)
        p[3] = top
        for i in (2, 1, 0):
            merged = add(self.lateral[i](cs[i], shards), ops.upsample_nearest2x(top))
            top = self.smooth[i](merged, shards)
            p[i] = top
        return FeaturePyramid(*p)


def build_topdown(stages: BackboneStages, pyramid_channels: int, rng: np.random.Generator) -> FeaturePyramid:
    return TopDown([c.shape[1] for c in stages.as_list()], pyramid_channels, rng)(stages)


class BottomUpBlock(Module):
    """N_{i+1} = ReLU(conv3x3(P_{i+1} + ReLU(conv3x3_stride2(N_i))))."""

    def __init__(self, channels: int, rng: np.random.Generator, norm: bool = False):
        self.down = ConvUnit(channels, channels, 3, rng, stride=2, norm=norm)
        self.fuse = ConvUnit(channels, channels, 3, rng, norm=norm)

    def forward(self, n_i: Tensor, p_next: Tensor, shards=None) -> Tensor:
        if n_i.shape[1] != p_next.shape[1]:
            raise ContractViolation("bottom-up block: channel mismatch")
        if n_i.shape[2] != 2 * p_next.shape[2] or n_i.shape[3] != 2 * p_next.shape[3]:
            raise ContractViolation(
                f"bottom-up block: N_i {n_i.shape[2:]} must be twice P_next {p_next.shape[2:]}"
            )
        return self.fuse(add(p_next, self.down(n_i, shards)), shards)


class AugmentedPath(Module):
    """Bottom-up path N2 -> N5 built from three blocks; N2 is P2 unchanged."""

    def __init__(self, channels: int, rng: np.random.Generator, norm: bool = False):
        self.blocks = [BottomUpBlock(channels, rng, norm) for _ in range(3)]

    def forward(self, p: FeaturePyramid, shards=None) -> AugmentedPyramid:
        ns = [p.p2]
        for block, p_next in zip(self.blocks, p.as_list()[1:]):
            ns.append(block(ns[-1], p_next, shards))
        return AugmentedPyramid(*ns)

    def num_param_layers(self) -> int:
        return count_param_layers(self)


def build_augmented_pyramid(p: FeaturePyramid, rng: np.random.Generator) -> AugmentedPyramid:
    return AugmentedPath(p.p2.shape[1], rng)(p)


def backbone_path_depth(backbone: Backbone) -> int:
    """Weighted layers from the C2 output up through the trunk to P5 (stages 3-5 plus P5's lateral)."""
    return sum(count_param_layers(s) for s in backbone.stages[1:]) + 1
