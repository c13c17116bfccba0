"""Held-out evaluation: per-instance mask IoU, box IoU and classification accuracy."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ..heads import decode_boxes
from ..ops import interp_weights
from ..roi import assign_levels
from ..tensor import Tensor, no_grad
from .data import SyntheticScene, box_iou, make_proposals
from .losses import BOX_TARGET_STD
from .train import EVAL_SEED_OFFSET

REPORT_COLUMNS = ("scene", "instances", "mask_iou", "box_iou", "accuracy")


def paste_mask(grid: np.ndarray, box: np.ndarray, h: int, w: int, threshold: float = 0.5) -> np.ndarray:
    """Resample an (S, S) grid laid over ``box`` onto the (h, w) image and threshold it.

    Pixel centres outside the box are background; inside, the grid is
    interpolated bilinearly with edge clamping.
    """
    s = grid.shape[0]
    x0, y0, x1, y1 = (float(v) for v in box)
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    gy = np.clip((ys - y0) / (y1 - y0) * s - 0.5, 0.0, s - 1.0)
    gx = np.clip((xs - x0) / (x1 - x0) * s - 0.5, 0.0, s - 1.0)
    soft = interp_weights(gy, s) @ grid @ interp_weights(gx, s).T
    inside = ((ys >= y0) & (ys < y1))[:, None] & ((xs >= x0) & (xs < x1))[None, :]
    return (soft >= threshold) & inside


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.astype(bool), b.astype(bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


@dataclass
class ScenePredictions:
    """Per-proposal outputs for one scene.

    ``mask_probs`` holds one (S, S) foreground-probability grid per
    proposal, laid over its decoded box.
    """

    proposals: np.ndarray
    decoded: np.ndarray
    classes: np.ndarray
    mask_probs: np.ndarray


@dataclass
class SceneScore:
    instances: int
    mask_iou: list[float]
    box_iou: list[float]
    correct: list[bool]


def score_scene(scene: SyntheticScene, pred: ScenePredictions) -> SceneScore:
    """Match each GT instance to the prediction whose decoded box overlaps it most."""
    h, w = scene.size
    ious = box_iou(pred.decoded, scene.gt_boxes)
    m_iou, b_iou, correct = [], [], []
    for g, inst in enumerate(scene.instances):
        j = int(np.argmax(ious[:, g]))
        b_iou.append(float(ious[j, g]))
        correct.append(bool(pred.classes[j] == inst.class_id))
        pasted = paste_mask(pred.mask_probs[j], pred.decoded[j], h, w)
        m_iou.append(mask_iou(pasted, inst.mask))
    return SceneScore(len(scene.instances), m_iou, b_iou, correct)


def _keep_valid(decoded: np.ndarray, fallback: np.ndarray, min_side: float = 1.0) -> np.ndarray:
    """Replace boxes that collapsed under clipping by the proposal they came from."""
    bad = (decoded[:, 2] - decoded[:, 0] < min_side) | (decoded[:, 3] - decoded[:, 1] < min_side)
    return np.where(bad[:, None], fallback, decoded)


def predict_scene(model, scene: SyntheticScene, seed: int) -> ScenePredictions:
    cfg = model.cfg
    h, w = scene.size
    rois = make_proposals(scene, seed, cfg.proposal_jitter, cfg.negatives_per_gt, cfg.proposals_per_gt, cfg.level_reference)
    boxes = np.array([r.as_array() for r in rois])
    levels = np.array([r.assigned_level for r in rois], dtype=np.int64)
    index = np.zeros(len(rois), dtype=np.int64)
    images = Tensor(scene.image[None])
    with no_grad():
        out = model(images, boxes, index, levels, mask_rows=np.array([], dtype=np.int64))
        logits = out.box.class_logits.data
        classes = logits.argmax(axis=1)
        fg_class = logits[:, 1:].argmax(axis=1) + 1
        deltas = out.box.box_deltas.data.reshape(len(rois), -1, 4)[np.arange(len(rois)), fg_class - 1]
        decoded = decode_boxes(boxes, deltas * BOX_TARGET_STD, clip_to=(w, h))
        # masks are predicted on the refined boxes, as at inference time
        decoded = _keep_valid(decoded, boxes)
        mask_levels = assign_levels(decoded, cfg.level_reference)
        masks = model(images, decoded, index, mask_levels).mask.fused_logits.data
    probs = 1.0 / (1.0 + np.exp(-masks[np.arange(len(rois)), fg_class - 1]))
    return ScenePredictions(boxes, decoded, classes, probs)


@dataclass
class EvalReport:
    rows: list[tuple]
    mean_mask_iou: float
    mean_box_iou: float
    accuracy: float


def evaluate(model, scenes: list[SyntheticScene], seed: int = 0) -> EvalReport:
    """Score a model on held-out scenes; summary means are taken over instances."""
    model.eval()
    rows, all_m, all_b, all_c = [], [], [], []
    for i, scene in enumerate(scenes):
        s = score_scene(scene, predict_scene(model, scene, seed * 7_919 + EVAL_SEED_OFFSET + i))
        rows.append((i, s.instances, float(np.mean(s.mask_iou)), float(np.mean(s.box_iou)), float(np.mean(s.correct))))
        all_m += s.mask_iou
        all_b += s.box_iou
        all_c += s.correct
    return EvalReport(rows, float(np.mean(all_m)), float(np.mean(all_b)), float(np.mean(all_c)))


def write_report(report: EvalReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for scene, n, m, b, a in report.rows:
            writer.writerow([scene, n, f"{m:.6f}", f"{b:.6f}", f"{a:.6f}"])
        total = sum(r[1] for r in report.rows)
        writer.writerow(["all", total, f"{report.mean_mask_iou:.6f}", f"{report.mean_box_iou:.6f}", f"{report.accuracy:.6f}"])
