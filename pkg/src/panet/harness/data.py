"""Synthetic scenes, jittered proposals and RoI sampling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..heads import MASK_SIZE, encode_boxes
from ..roi import DESK_REFERENCE, RoI, assign_levels, roi_align_batch
from ..tensor import ContractViolation, Tensor

RECTANGLE, ELLIPSE = 1, 2
CLASS_NAMES = {0: "background", RECTANGLE: "rectangle", ELLIPSE: "ellipse"}


@dataclass
class Instance:
    class_id: int
    box: np.ndarray  # x0, y0, x1, y1 (pixel edges)
    mask: np.ndarray  # (H, W) uint8


@dataclass
class SyntheticScene:
    image: np.ndarray  # (3, H, W)
    instances: list[Instance]

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    @property
    def gt_boxes(self) -> np.ndarray:
        return np.stack([inst.box for inst in self.instances])

    @property
    def gt_classes(self) -> np.ndarray:
        return np.array([inst.class_id for inst in self.instances])


def ellipse_mask(h: int, w: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    return (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.uint8)


def rectangle_mask(h: int, w: int, y0: int, x0: int, y1: int, x1: int) -> np.ndarray:
    m = np.zeros((h, w), dtype=np.uint8)
    m[y0:y1, x0:x1] = 1
    return m


def tight_box(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=float)


def generate_synthetic_scene(
    seed: int, h: int = 64, w: int = 64, max_instances: int = 3, min_frac: float = 0.2, max_frac: float = 0.6
) -> SyntheticScene:
    """Rectangles (class 1) and ellipses (class 2) on a noisy background.

    Objects do not overlap, so every mask is complete and its box is tight.
    """
    if h % 32 or w % 32:
        raise ContractViolation(f"scene size {h}x{w} must be divisible by 32")
    rng = np.random.default_rng(seed)
    bg = rng.uniform(0.0, 1.0, 3)
    image = np.broadcast_to(bg[:, None, None], (3, h, w)).copy()
    n = int(rng.integers(1, max_instances + 1))
    occupied = np.zeros((h, w), dtype=bool)
    instances: list[Instance] = []
    for _ in range(n):
        for _attempt in range(30):
            cls = int(rng.integers(1, 3))
            bh = int(rng.integers(int(min_frac * h), int(max_frac * h) + 1))
            bw = int(rng.integers(int(min_frac * w), int(max_frac * w) + 1))
            y0 = int(rng.integers(0, h - bh + 1))
            x0 = int(rng.integers(0, w - bw + 1))
            if cls == RECTANGLE:
                mask = rectangle_mask(h, w, y0, x0, y0 + bh, x0 + bw)
            else:
                mask = ellipse_mask(h, w, y0 + bh / 2, x0 + bw / 2, bh / 2, bw / 2)
            # keep a 2 px gap between objects
            grown = np.zeros_like(occupied)
            box = tight_box(mask).astype(int)
            grown[max(box[1] - 2, 0) : box[3] + 2, max(box[0] - 2, 0) : box[2] + 2] = True
            if (grown & occupied).any():
                continue
            color = rng.uniform(0.0, 1.0, 3)
            while np.abs(color - bg).max() < 0.35:
                color = rng.uniform(0.0, 1.0, 3)
            image[:, mask.astype(bool)] = color[:, None]
            occupied |= grown
            instances.append(Instance(cls, tight_box(mask), mask))
            break
    if not instances:  # pragma: no cover - first placement on an empty canvas always succeeds
        raise RuntimeError("failed to place any instance")
    image += 0.08 * rng.standard_normal(image.shape)
    return SyntheticScene(image, instances)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (A, 4) and (B, 4) boxes."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def _clip_valid(boxes: np.ndarray, h: int, w: int, min_side: float = 2.0) -> np.ndarray:
    boxes = boxes.copy()
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, w)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, h)
    keep = (boxes[:, 2] - boxes[:, 0] >= min_side) & (boxes[:, 3] - boxes[:, 1] >= min_side)
    return boxes[keep]


def jitter_boxes(gt: np.ndarray, rng: np.random.Generator, jitter: float, copies: int) -> np.ndarray:
    """``copies`` perturbed versions of each box (GT-major order), unclipped."""
    gt = np.repeat(np.asarray(gt, dtype=float).reshape(-1, 4), copies, axis=0)
    u = rng.uniform(-1.0, 1.0, (gt.shape[0], 4)) * jitter
    w, h = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    cx = gt[:, 0] + 0.5 * w + u[:, 0] * w
    cy = gt[:, 1] + 0.5 * h + u[:, 1] * h
    w = w * (1.0 + u[:, 2])
    h = h * (1.0 + u[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def make_proposals(
    scene: SyntheticScene,
    seed: int,
    jitter: float = 0.2,
    negatives_per_gt: int = 12,
    copies_per_gt: int = 8,
    reference: float = DESK_REFERENCE,
) -> list[RoI]:
    """Stand-in for an RPN: jittered GT boxes followed by background boxes.

    Background boxes are half drawn near objects (so that some overlap them
    partially) and half anywhere in the image.
    """
    rng = np.random.default_rng(seed)
    h, w = scene.size
    gt = scene.gt_boxes
    jittered = jitter_boxes(gt, rng, jitter, copies_per_gt)
    near = jitter_boxes(gt, rng, 1.0, (negatives_per_gt + 1) // 2)
    n_far = negatives_per_gt * len(gt) - near.shape[0]
    sides = rng.uniform(0.15, 0.6, (n_far, 2)) * np.array([w, h])
    corner = rng.uniform(0.0, 1.0, (n_far, 2)) * (np.array([w, h]) - sides)
    far = np.concatenate([corner, corner + sides], axis=1)
    boxes = np.concatenate([_clip_valid(jittered, h, w), _clip_valid(near, h, w), far])
    levels = assign_levels(boxes, reference)
    return [RoI(*map(float, b), int(k)) for b, k in zip(boxes, levels)]


@dataclass
class RoiBatch:
    rois: list[RoI]
    labels: np.ndarray
    box_targets: np.ndarray
    mask_targets: np.ndarray  # (P, 28, 28) for the positives, in order
    matched_gt: np.ndarray
    image_index: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.image_index is None:
            self.image_index = np.zeros(len(self.rois), dtype=np.int64)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([r.as_array() for r in self.rois]).reshape(-1, 4)

    @property
    def levels(self) -> np.ndarray:
        return np.array([r.assigned_level for r in self.rois], dtype=np.int64)

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels > 0)

    def shard_sizes(self, n_images: int) -> list[int]:
        return np.bincount(self.image_index, minlength=n_images).tolist()

    def positive_shard_sizes(self, n_images: int) -> list[int]:
        return np.bincount(self.image_index[self.positives], minlength=n_images).tolist()

    @classmethod
    def concat(cls, batches: list["RoiBatch"]) -> "RoiBatch":
        return cls(
            [r for b in batches for r in b.rois],
            np.concatenate([b.labels for b in batches]),
            np.concatenate([b.box_targets for b in batches]),
            np.concatenate([b.mask_targets for b in batches]),
            np.concatenate([b.matched_gt for b in batches]),
            np.concatenate([np.full(len(b.rois), i, dtype=np.int64) for i, b in enumerate(batches)]),
        )


def crop_masks(mask: np.ndarray, boxes: np.ndarray, size: int = MASK_SIZE) -> np.ndarray:
    """Bilinear (R, size, size) crops of a binary mask over boxes, thresholded at 0.5."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    if boxes.shape[0] == 0:
        return np.zeros((0, size, size))
    h, w = mask.shape
    soft = roi_align_batch(
        Tensor(mask.reshape(1, 1, h, w).astype(float)), boxes, np.zeros(len(boxes)), size, 1.0
    ).data[:, 0]
    return (soft >= 0.5).astype(float)


def sample_rois(
    proposals: list[RoI],
    scene: SyntheticScene,
    rois_per_image: int = 64,
    positive_fraction: float = 0.25,
    rng: np.random.Generator | None = None,
    fg_thresh: float = 0.5,
    bg_range: tuple[float, float] = (0.1, 0.5),
) -> RoiBatch:
    """Label proposals by IoU and draw a 1:3 positive/negative batch."""
    if rois_per_image < 4:
        raise ContractViolation("rois_per_image must be at least 4")
    rng = rng or np.random.default_rng(0)
    boxes = np.array([r.as_array() for r in proposals]).reshape(-1, 4)
    iou = box_iou(boxes, scene.gt_boxes)
    best = iou.max(axis=1)
    match = iou.argmax(axis=1)
    pos = np.flatnonzero(best >= fg_thresh)
    neg = np.flatnonzero((best >= bg_range[0]) & (best < bg_range[1]))
    n_pos = min(len(pos), int(round(rois_per_image * positive_fraction)))
    n_neg = min(len(neg), rois_per_image - n_pos)
    if len(neg) == 0:
        warnings.warn("degenerate RoI batch: no negatives available", RuntimeWarning, stacklevel=2)
    pos = rng.choice(pos, n_pos, replace=False) if n_pos else pos[:0]
    neg = rng.choice(neg, n_neg, replace=False) if n_neg else neg[:0]
    keep = np.concatenate([pos, neg]).astype(np.int64)
    labels = np.zeros(len(keep), dtype=np.int64)
    labels[:n_pos] = scene.gt_classes[match[pos]]
    matched = match[keep]
    targets = np.zeros((len(keep), 4))
    if n_pos:
        targets[:n_pos] = encode_boxes(scene.gt_boxes[match[pos]], boxes[pos])
    masks = np.stack(
        [crop_masks(scene.instances[g].mask, boxes[i])[0] for i, g in zip(pos, match[pos])]
    ) if n_pos else np.zeros((0, MASK_SIZE, MASK_SIZE))
    return RoiBatch([proposals[i] for i in keep], labels, targets, masks, matched)
