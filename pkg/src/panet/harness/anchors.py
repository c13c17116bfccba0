"""Anchor shape templates for the Cityscapes and MVD recipes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import ContractViolation

PRESETS = {
    "mvd": ([8**2, 16**2, 32**2, 64**2, 128**2, 256**2, 512**2], [0.2, 0.5, 1.0, 2.0, 5.0]),
    # cited FPN defaults: five octave scales, three ratios
    "cityscapes": ([32**2, 64**2, 128**2, 256**2, 512**2], [0.5, 1.0, 2.0]),
}


@dataclass
class AnchorSet:
    scales: list[float]
    aspect_ratios: list[float]
    anchors: np.ndarray  # (S * R, 2) widths and heights, scale-major

    def __len__(self) -> int:
        return len(self.anchors)


def generate_anchors(preset: str = "mvd", scales=None, aspect_ratios=None) -> AnchorSet:
    """Anchor (w, h) with ``w * h == scale`` and ``w / h == ratio`` for every pair."""
    if preset == "custom":
        if scales is None or aspect_ratios is None:
            raise ContractViolation("custom preset needs scales and aspect_ratios")
    elif preset in PRESETS:
        scales, aspect_ratios = PRESETS[preset]
    else:
        raise ContractViolation(f"unknown anchor preset {preset!r}")
    scales = [float(s) for s in scales]
    aspect_ratios = [float(r) for r in aspect_ratios]
    if min(scales) <= 0 or min(aspect_ratios) <= 0:
        raise ContractViolation("anchor scales and ratios must be positive")
    s = np.repeat(scales, len(aspect_ratios))
    r = np.tile(aspect_ratios, len(scales))
    w = np.sqrt(s * r)
    return AnchorSet(scales, aspect_ratios, np.stack([w, s / w], axis=1))
