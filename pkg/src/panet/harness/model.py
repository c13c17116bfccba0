"""Full detector: backbone, pyramid, optional bottom-up path, box and mask heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..heads import BoxHead, BoxPrediction, MaskHead, MaskPrediction
from ..nn import Module
from ..pyramid import AugmentedPath, Backbone, TopDown
from ..roi import BOX_POOL, MASK_POOL, pool_all_levels, pool_assigned
from ..tensor import Tensor
from .config import TrainConfig


@dataclass
class Outputs:
    box: BoxPrediction
    mask: MaskPrediction | None


def standardize_images(images: Tensor) -> Tensor:
    """Per-image, per-channel zero mean and unit variance (a constant input, not differentiated)."""
    x = images.data
    mean = x.mean(axis=(2, 3), keepdims=True)
    std = x.std(axis=(2, 3), keepdims=True)
    return Tensor((x - mean) / (std + 1e-6))


class PANet(Module):
    """Detector assembled according to the ablation switches of a TrainConfig.

    With every switch off this is the plain FPN + Mask R-CNN style baseline:
    no N levels, single-level pooling and an FCN-only mask head.
    """

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        pc = cfg.pyramid_channels
        norm = cfg.mbn
        self.backbone = Backbone(cfg.backbone_channels, rng, norm=norm and cfg.sync_bn_everywhere)
        self.topdown = TopDown(cfg.backbone_channels, pc, rng, norm=norm)
        self.bottom_up = AugmentedPath(pc, rng, norm=norm) if cfg.bpa else None
        self.box_head = BoxHead(cfg.box_config(), pc, BOX_POOL, rng)
        self.mask_head = MaskHead(cfg.mask_config(), pc, rng, MASK_POOL)

    def trainable_parameters(self):
        if self.cfg.backbone_freeze:
            frozen = {id(p) for p in self.backbone.parameters()}
            return [p for p in self.parameters() if id(p) not in frozen]
        return self.parameters()

    def features(self, images: Tensor):
        shards = [1] * images.shape[0]
        if self.cfg.input_standardize:
            images = standardize_images(images)
        p = self.topdown(self.backbone(images, shards), shards)
        return self.bottom_up(p, shards) if self.bottom_up is not None else p

    def pool(self, feats, boxes, image_index, levels, size) -> list[Tensor]:
        if self.cfg.afp:
            return pool_all_levels(feats, boxes, image_index, size)
        return [pool_assigned(feats, boxes, image_index, levels, size)]

    def forward(
        self,
        images: Tensor,
        boxes: np.ndarray,
        image_index: np.ndarray,
        levels: np.ndarray,
        mask_rows: np.ndarray | None = None,
    ) -> Outputs:
        """Predict boxes for every RoI and masks for ``mask_rows`` (default: all)."""
        n = images.shape[0]
        boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
        image_index = np.asarray(image_index, dtype=np.int64)
        levels = np.asarray(levels, dtype=np.int64)
        feats = self.features(images)
        box_shards = np.bincount(image_index, minlength=n).tolist()
        box = self.box_head(self.pool(feats, boxes, image_index, levels, BOX_POOL), box_shards)
        rows = np.arange(len(boxes)) if mask_rows is None else np.asarray(mask_rows, dtype=np.int64)
        if rows.size == 0:
            return Outputs(box, None)
        mask_shards = np.bincount(image_index[rows], minlength=n).tolist()
        grids = self.pool(feats, boxes[rows], image_index[rows], levels[rows], MASK_POOL)
        return Outputs(box, self.mask_head(grids, mask_shards))
