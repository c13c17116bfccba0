"""Finite-difference checks over every differentiable operation of the model."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .. import ops
from ..gradcheck import GradCheckReport, grad_check
from ..heads import BoxHead, BoxHeadConfig, MaskHead, MaskHeadConfig
from ..pyramid import BottomUpBlock
from ..roi import roi_align_batch
from ..sync_bn import BNLayer
from ..tensor import Tensor, elementwise_fuse, mul, relu, sigmoid
from .losses import mask_bce_loss, smooth_l1_box_loss, softmax_cross_entropy

TOLERANCE = 1e-4


def _weighted(fn: Callable, seed: int) -> Callable:
    """Wrap ``fn`` so the checked scalar is a fixed random projection of its outputs.

    A plain sum is a degenerate objective for normalisation layers (its
    gradient is identically zero), so every check uses random weights.
    """
    cache: dict[int, list[np.ndarray]] = {}

    def wrapped(*args):
        out = fn(*args)
        outs = [out] if isinstance(out, Tensor) else list(out)
        if seed not in cache:
            rng = np.random.default_rng(seed)
            cache[seed] = [rng.standard_normal(o.shape) for o in outs]
        return [mul(o, Tensor(w)) for o, w in zip(outs, cache[seed])]

    return wrapped


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x) + 0.0


def _jitter(module, rng):
    """Move parameters off their initial values; zero biases put ReLUs exactly on the kink."""
    for p in module.parameters():
        p.data += 0.05 * rng.standard_normal(p.shape)
    return module


def _param(rng, *shape):
    return Tensor(rng.standard_normal(shape) * 0.5, requires_grad=True)


def _cases(rng):
    x = _param(rng, 2, 3, 6, 6)
    yield "conv2d 3x3 stride 1", lambda a, w, b: ops.conv2d(a, w, b, 1, 1), [x, _param(rng, 4, 3, 3, 3), _param(rng, 4)], None
    yield "conv2d 3x3 stride 2", lambda a, w, b: ops.conv2d(a, w, b, 2, 1), [x, _param(rng, 4, 3, 3, 3), _param(rng, 4)], None
    yield "conv2d 1x1", lambda a, w, b: ops.conv2d(a, w, b), [x, _param(rng, 5, 3, 1, 1), _param(rng, 5)], None
    yield "conv_transpose2d k2", lambda a, w, b: ops.conv_transpose2d(a, w, b), [x, _param(rng, 3, 2, 2, 2), _param(rng, 2)], None
    yield "conv_transpose2d k4", lambda a, w, b: ops.conv_transpose2d(a, w, b, 2, 1), [x, _param(rng, 3, 2, 4, 4), _param(rng, 2)], None
    yield "linear", ops.linear, [_param(rng, 5, 7), _param(rng, 3, 7), _param(rng, 3)], None
    yield "relu", relu, [Tensor(_away_from_zero(rng, (4, 9)), requires_grad=True)], None
    yield "sigmoid", sigmoid, [_param(rng, 4, 9)], None
    yield "upsample_nearest2x", ops.upsample_nearest2x, [_param(rng, 1, 2, 3, 3)], None

    # distinct fusion inputs keep the max away from ties
    base = rng.standard_normal((3, 4, 5))
    fuse_in = [Tensor(base + 0.3 * i + 0.01 * rng.standard_normal(base.shape), requires_grad=True) for i in range(4)]
    rng.shuffle(fuse_in)
    for mode in ("max", "sum", "product"):
        yield f"elementwise_fuse {mode}", (lambda *t, m=mode: elementwise_fuse(list(t), m)), fuse_in, None

    labels = np.array([0, 2, 1, 0, 1])
    yield "softmax_cross_entropy", lambda z: softmax_cross_entropy(z, labels), [_param(rng, 5, 3)], None
    targets = 0.05 * rng.standard_normal((5, 4))
    yield "smooth_l1_box_loss", lambda d: smooth_l1_box_loss(d, labels, targets), [_param(rng, 5, 8)], None
    masks = (rng.uniform(size=(3, 6, 6)) > 0.5).astype(float)
    yield "mask_bce_loss", lambda z: mask_bce_loss(z, np.array([2, 1, 1]), masks), [_param(rng, 3, 2, 6, 6)], None

    fmap = _param(rng, 2, 3, 8, 8)
    boxes = np.array([[1.3, 2.1, 20.7, 17.9], [0.0, 0.0, 31.0, 30.0], [5.5, 9.2, 9.9, 12.0]])
    yield "roi_align", lambda f: roi_align_batch(f, boxes, np.array([0, 1, 1]), 5, 4.0, 2), [fmap], None

    block = _jitter(BottomUpBlock(3, rng, norm=True), rng)
    n_i, p_next = _param(rng, 2, 3, 8, 8), _param(rng, 2, 3, 4, 4)
    yield "bottom_up_block", lambda a, b, *p: block(a, b, [1, 1]), [n_i, p_next, *block.parameters()], 15

    bn = BNLayer(3)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[:] = rng.standard_normal(3)
    xb = _param(rng, 4, 3, 5, 5)
    yield "syncbn 2 shards", lambda a, g, b: bn(a, [2, 2]), [xb, bn.gamma, bn.beta], None

    grids = [_param(rng, 3, 4, 7, 7) for _ in range(4)]
    for variant in ("two_fc", "heavier"):
        head = _jitter(BoxHead(BoxHeadConfig(variant=variant, hidden_dim=8, conv_channels=4, norm=True), 4, 7, rng), rng)
        fn = lambda *t, h=head: (lambda p: [p.class_logits, p.box_deltas])(h(list(t[:4]), [1, 2]))
        yield f"box head {variant}", fn, grids + head.parameters(), 6

    mgrids = [_param(rng, 2, 4, 14, 14) for _ in range(4)]
    mhead = _jitter(MaskHead(MaskHeadConfig(channels=4, norm=True), 4, rng), rng)
    fn = lambda *t: (lambda p: [p.fused_logits])(mhead(list(t[:4]), [1, 1]))
    yield "mask head with fc fusion", fn, mgrids + mhead.parameters(), 4


def run_gradient_suite(seed: int = 0, progress: Callable[[str], None] | None = None) -> tuple[list[GradCheckReport], float]:
    """Run every check; returns the reports and the wall-clock seconds taken."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    reports = []
    for i, (name, fn, inputs, max_checks) in enumerate(_cases(rng)):
        report = grad_check(_weighted(fn, seed + i), inputs, eps=1e-5, tol=TOLERANCE, max_checks=max_checks, seed=seed + i, name=name)
        reports.append(report)
        if progress is not None:
            progress(report.line())
    return reports, time.perf_counter() - t0
