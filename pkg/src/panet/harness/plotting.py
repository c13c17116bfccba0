"""Figures written next to the CSV outputs of the CLI."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..pyramid import LEVELS  # noqa: E402

LEVEL_COLORS = {2: "#4c72b0", 3: "#dd8452", 4: "#55a868", 5: "#c44e52"}
LOSS_NAMES = ("cls", "box", "mask", "total")


def _finish(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_curves(rows, path, window: int = 50) -> None:
    """Per-step losses (thin) with a trailing moving average (thick)."""
    rows = np.asarray(rows, dtype=float)
    steps = rows[:, 0]
    fig, ax = plt.subplots(figsize=(7, 4))
    for col, name in enumerate(LOSS_NAMES, start=2):
        line, = ax.plot(steps, rows[:, col], lw=0.4, alpha=0.35)
        k = min(window, len(steps))
        smooth = np.convolve(rows[:, col], np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1 :], smooth, lw=1.8, color=line.get_color(), label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(ls=":")
    ax.legend(frameon=False)
    _finish(fig, path)


def plot_source_ratios(stats, path) -> None:
    """Stacked bars: share of fused features coming from each level, per assigned-level group."""
    fig, ax = plt.subplots(figsize=(6, 4))
    groups = [s.group for s in stats]
    x = np.arange(len(groups))
    bottom = np.zeros(len(groups))
    for k in LEVELS:
        share = np.array([s.ratio(k) for s in stats])
        ax.bar(x, share, bottom=bottom, color=LEVEL_COLORS[k], label=f"level {k}", width=0.6)
        bottom += share
    ax.set_xticks(x, [f"assigned {g}" for g in groups])
    ax.set_ylabel("fraction of max-fusion wins")
    ax.set_ylim(0, 1)
    handles, labels = ax.get_legend_handles_labels()
    ax.legend(handles[::-1], labels[::-1], frameon=False, fontsize=8, loc="upper left", bbox_to_anchor=(1.0, 1.0))
    _finish(fig, path)


def plot_scenes(scenes, path, columns: int = 4) -> None:
    """Scene grid with instance outlines (rectangles solid, ellipses dashed)."""
    rows = int(np.ceil(len(scenes) / columns))
    fig, axes = plt.subplots(rows, columns, figsize=(2.2 * columns, 2.2 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, scene in zip(axes.ravel(), scenes):
        ax.imshow(np.clip(scene.image.transpose(1, 2, 0), 0, 1), interpolation="nearest")
        for inst in scene.instances:
            ax.contour(inst.mask, levels=[0.5], colors="white", linewidths=0.8)
            x0, y0, x1, y1 = inst.box
            ls = "-" if inst.class_id == 1 else "--"
            ax.add_patch(plt.Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0, fill=False, ec="yellow", ls=ls, lw=0.8))
    _finish(fig, path)


def plot_eval_histogram(report, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist([r[2] for r in report.rows], bins=20, range=(0, 1), color="#4c72b0", alpha=0.8, label="mask IoU")
    ax.hist([r[3] for r in report.rows], bins=20, range=(0, 1), color="#dd8452", alpha=0.6, label="box IoU")
    ax.set_xlabel("per-scene mean IoU")
    ax.set_ylabel("scenes")
    ax.legend(frameon=False)
    _finish(fig, path)
