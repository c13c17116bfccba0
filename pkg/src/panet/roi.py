"""ROIAlign, pyramid level assignment, multi-level pooling and source-ratio statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .ops import interp_weights
from .pyramid import LEVELS, STRIDES
from .tensor import ContractViolation, Tensor, concat, reshape, take_rows

CANONICAL_LEVEL = 4
DESK_REFERENCE = 56.0
BOX_POOL = 7
MASK_POOL = 14
SAMPLING_RATIO = 2


@dataclass(frozen=True)
class RoI:
    x0: float
    y0: float
    x1: float
    y1: float
    assigned_level: int = 0

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ContractViolation(f"degenerate RoI {self.as_array()}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=float)

    def with_level(self, reference: float = DESK_REFERENCE) -> "RoI":
        return RoI(self.x0, self.y0, self.x1, self.y1, assign_level(self, reference))

    def clipped(self, width: float, height: float) -> "RoI":
        return RoI(max(self.x0, 0.0), max(self.y0, 0.0), min(self.x1, width), min(self.y1, height), self.assigned_level)


def _level_from_size(w: float, h: float, reference: float) -> int:
    if not (w > 0 and h > 0):
        raise ContractViolation(f"assign_level needs positive area, got {w}x{h}")
    # floor(log2(v)) taken from the binary exponent: exact, so doubling a box adds exactly 1
    _, exp = math.frexp(math.sqrt(w * h) / reference)
    return int(min(max(CANONICAL_LEVEL + exp - 1, LEVELS[0]), LEVELS[-1]))


def assign_level(roi: RoI, image_scale_reference: float = DESK_REFERENCE) -> int:
    """FPN heuristic ``floor(4 + log2(sqrt(w*h) / reference))`` clamped to [2, 5]."""
    return _level_from_size(roi.width, roi.height, image_scale_reference)


def assign_levels(boxes: np.ndarray, reference: float = DESK_REFERENCE) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    return np.array(
        [_level_from_size(b[2] - b[0], b[3] - b[1], reference) for b in boxes], dtype=np.int64
    )


def roi_sample_weights(lo: np.ndarray, hi: np.ndarray, size: int, out_size: int, sampling_ratio: int) -> np.ndarray:
    """Per-bin averaged interpolation weights along one axis.

    ``lo``/``hi`` are box edges in map-cell units, shape (R,).  Returns an
    (R, out_size, size) array: bin ``i`` averages ``sampling_ratio`` samples at
    regular sub-bin centres, with cell ``k`` centred at coordinate ``k + 0.5``.
    """
    lo = np.asarray(lo, dtype=float)[:, None, None]
    hi = np.asarray(hi, dtype=float)[:, None, None]
    bin_len = (hi - lo) / out_size
    bins = np.arange(out_size)[None, :, None]
    sub = (np.arange(sampling_ratio)[None, None, :] + 0.5) / sampling_ratio
    coords = lo + (bins + sub) * bin_len - 0.5
    return interp_weights(coords, size).mean(axis=2)


def roi_align_batch(
    feats: Tensor,
    boxes: np.ndarray,
    image_index: np.ndarray,
    out_size: int,
    stride: float,
    sampling_ratio: int = SAMPLING_RATIO,
) -> Tensor:
    """ROIAlign of R boxes (image coordinates) on an (N, C, H, W) map -> (R, C, S, S).

    Bilinear sampling is separable, so each box reduces to two small weight
    matrices and the pooled grid is ``Ay @ F @ Ax.T``.
    """
    if out_size < 1 or sampling_ratio < 1:
        raise ContractViolation("roi_align: out_size and sampling_ratio must be >= 1")
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4) / stride
    image_index = np.asarray(image_index, dtype=np.int64).reshape(-1)
    n, c, h, w = feats.shape
    r = boxes.shape[0]
    if r == 0:
        return Tensor(np.zeros((0, c, out_size, out_size)))
    ay = roi_sample_weights(boxes[:, 1], boxes[:, 3], h, out_size, sampling_ratio)
    ax = roi_sample_weights(boxes[:, 0], boxes[:, 2], w, out_size, sampling_ratio)
    fr = feats.data[image_index]
    out = ay[:, None] @ (fr @ ax.transpose(0, 2, 1)[:, None])

    def backward(g):
        dfr = (ay.transpose(0, 2, 1)[:, None] @ g) @ ax[:, None]
        full = np.zeros_like(feats.data)
        for img in np.unique(image_index):
            full[img] = dfr[image_index == img].sum(axis=0)
        return (full,)

    return Tensor.from_op(out, (feats,), backward)


def roi_align(
    level_map: Tensor, roi: RoI, out_size: int, sampling_ratio: int = SAMPLING_RATIO, stride: float = 1
) -> Tensor:
    """ROIAlign of one box on a (C, H, W) map -> (C, S, S)."""
    c, h, w = level_map.shape
    pooled = roi_align_batch(
        reshape(level_map, (1, c, h, w)), roi.as_array()[None], np.zeros(1), out_size, stride, sampling_ratio
    )
    return reshape(pooled, (c, out_size, out_size))


@dataclass
class PooledGrid:
    per_level: dict[int, Tensor]
    box: RoI


def pool_all_levels(pyramid, boxes, image_index, out_size: int, sampling_ratio: int = SAMPLING_RATIO) -> list[Tensor]:
    """Pool every box from every pyramid level: four (R, C, S, S) tensors, levels 2..5."""
    return [
        roi_align_batch(pyramid[k], boxes, image_index, out_size, STRIDES[k], sampling_ratio) for k in LEVELS
    ]


def pool_assigned(pyramid, boxes, image_index, levels, out_size: int, sampling_ratio: int = SAMPLING_RATIO) -> Tensor:
    """FPN-style pooling: each box only from its assigned level -> (R, C, S, S)."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    image_index = np.asarray(image_index)
    levels = np.asarray(levels)
    parts, order = [], []
    for k in LEVELS:
        sel = np.flatnonzero(levels == k)
        if sel.size == 0:
            continue
        parts.append(roi_align_batch(pyramid[k], boxes[sel], image_index[sel], out_size, STRIDES[k], sampling_ratio))
        order.append(sel)
    stacked = concat(parts, axis=0)
    inverse = np.empty(boxes.shape[0], dtype=np.intp)
    inverse[np.concatenate(order)] = np.arange(boxes.shape[0])
    return take_rows(stacked, inverse)


def adaptive_pool(pyramid, roi: RoI, out_size: int, sampling_ratio: int = SAMPLING_RATIO, image: int = 0) -> PooledGrid:
    """Pool one proposal from all four levels of a batched pyramid; no fusion here."""
    grids = pool_all_levels(pyramid, roi.as_array()[None], np.array([image]), out_size, sampling_ratio)
    per_level = {k: reshape(g, g.shape[1:]) for k, g in zip(LEVELS, grids)}
    return PooledGrid(per_level, roi)


@dataclass
class SourceRatioStats:
    group: int
    counts: dict[int, int] = field(default_factory=lambda: {k: 0 for k in LEVELS})
    total: int = 0

    def merge(self, other: "SourceRatioStats") -> "SourceRatioStats":
        if other.group != self.group:
            raise ContractViolation("cannot merge statistics of different groups")
        return SourceRatioStats(
            self.group, {k: self.counts[k] + other.counts[k] for k in LEVELS}, self.total + other.total
        )

    __add__ = merge

    def ratio(self, level: int) -> float:
        return self.counts[level] / self.total if self.total else 0.0

    def off_level_fraction(self) -> float:
        return 1.0 - self.ratio(self.group) if self.total else 0.0


def source_ratio_stats(grids_after_first_layer: Sequence, group: int) -> SourceRatioStats:
    """Tally which level wins the elementwise max; ties go to the lowest level."""
    arrays = [g.data if isinstance(g, Tensor) else np.asarray(g) for g in grids_after_first_layer]
    if len(arrays) != len(LEVELS):
        raise ContractViolation("source_ratio_stats needs one grid per level")
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ContractViolation("source_ratio_stats: grid shapes differ")
    winner = np.stack(arrays).argmax(axis=0)
    counts = np.bincount(winner.ravel(), minlength=len(LEVELS))
    return SourceRatioStats(group, {k: int(counts[i]) for i, k in enumerate(LEVELS)}, int(winner.size))


def write_stats_csv(stats: Iterable[SourceRatioStats], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["group_level", "source_level", "count", "total", "ratio"])
        for s in sorted(stats, key=lambda s: s.group):
            for k in LEVELS:
                writer.writerow([s.group, k, s.counts[k], s.total, f"{s.ratio(k):.6f}"])
