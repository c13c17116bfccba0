"""SGD training loop with per-step CSV metrics and checkpoints."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..tensor import Tensor
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data import RoiBatch, SyntheticScene, generate_synthetic_scene, make_proposals, sample_rois
from .losses import Losses, compute_losses
from .model import PANet

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "lr", "cls", "box", "mask", "total")
EVAL_SEED_OFFSET = 1_000_000


class TrainingDiverged(RuntimeError):
    pass


def make_scenes(cfg: TrainConfig, count: int, offset: int = 0) -> list[SyntheticScene]:
    base = cfg.seed * 10_000_019 + offset
    return [
        generate_synthetic_scene(base + i, cfg.image_size, cfg.image_size, cfg.max_instances)
        for i in range(count)
    ]


def eval_scenes(cfg: TrainConfig) -> list[SyntheticScene]:
    return make_scenes(cfg, cfg.eval_scenes, EVAL_SEED_OFFSET)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Linear warm-up from a third of the base rate, then a x0.1 drop at ``lr_drop_at``."""
    lr = cfg.learning_rate
    if step <= cfg.warmup_steps:
        frac = step / max(cfg.warmup_steps, 1)
        lr *= 1.0 / 3.0 + (2.0 / 3.0) * frac
    if step > cfg.lr_drop_at * cfg.steps:
        lr *= 0.1
    return lr


class SGD:
    """Momentum SGD (``v = m*v + lr*(g + wd*p); p -= v``); decay only where flagged."""

    def __init__(self, params, momentum: float, weight_decay: float):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if p.weight_decay else p.grad
            v *= self.momentum
            v += lr * g
            p.data -= v


def build_batch(cfg: TrainConfig, scenes: list[SyntheticScene], step_seed: int):
    rng = np.random.default_rng(step_seed)
    batches = []
    for j, scene in enumerate(scenes):
        props = make_proposals(
            scene, step_seed * 31 + j, cfg.proposal_jitter, cfg.negatives_per_gt,
            cfg.proposals_per_gt, cfg.level_reference,
        )
        batches.append(sample_rois(props, scene, cfg.rois_per_image, cfg.positive_fraction, rng))
    images = Tensor(np.stack([s.image for s in scenes]))
    return images, RoiBatch.concat(batches)


def train_step(model: PANet, images: Tensor, batch: RoiBatch) -> Losses:
    out = model(images, batch.boxes, batch.image_index, batch.levels, batch.positives)
    losses = compute_losses(out.box, out.mask, batch)
    model.zero_grad()
    losses.total.backward()
    return losses


@dataclass
class TrainResult:
    model: PANet
    rows: list[tuple]
    seconds: float


def _format_row(row) -> list[str]:
    return [str(row[0])] + [f"{v:.10g}" for v in row[1:]]


def train(cfg: TrainConfig, out_dir=None, scenes: list[SyntheticScene] | None = None, progress: bool = False) -> TrainResult:
    """Train from scratch; writes ``metrics.csv`` and ``model.pank`` into ``out_dir`` if given."""
    t0 = time.perf_counter()
    scenes = scenes if scenes is not None else make_scenes(cfg, cfg.num_scenes)
    model = PANet(cfg, np.random.default_rng(cfg.seed))
    model.train()
    opt = SGD(model.trainable_parameters(), cfg.momentum, cfg.weight_decay)
    order_rng = np.random.default_rng(cfg.seed + 7)
    order = np.array([], dtype=np.int64)
    rows = []
    for step in range(1, cfg.steps + 1):
        if order.size < cfg.images_per_step:
            order = np.concatenate([order, order_rng.permutation(len(scenes))])
        picked, order = order[: cfg.images_per_step], order[cfg.images_per_step :]
        images, batch = build_batch(cfg, [scenes[i] for i in picked], cfg.seed * 1_000_003 + step)
        losses = train_step(model, images, batch)
        values = losses.values()
        if not np.all(np.isfinite(values)):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: cls={values[0]} box={values[1]} mask={values[2]}"
            )
        lr = learning_rate(cfg, step)
        opt.step(lr)
        rows.append((step, lr, *values))
        if progress and (step % 50 == 0 or step == 1):
            log.info("step %d lr %.4g total %.4f (cls %.4f box %.4f mask %.4f)", step, lr, values[3], *values[:3])
    seconds = time.perf_counter() - t0
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics(rows, out_dir / "metrics.csv")
        save_checkpoint(model, cfg, out_dir / "model.pank")
    return TrainResult(model, rows, seconds)


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow(_format_row(row))


def median_window(rows, lo: int, hi: int) -> float:
    """Median total loss over steps ``lo..hi`` inclusive."""
    return float(np.median([r[5] for r in rows if lo <= r[0] <= hi]))
