"""Scalar-loop reference implementations shared by several test modules."""

import math

import numpy as np


def scalar_bilinear(fmap, c, y, x):
    """Four-neighbour interpolation with zero outside the map (cell k centred at k)."""
    h, w = fmap.shape[1:]
    y0, x0 = math.floor(y), math.floor(x)
    total = 0.0
    for yy in (y0, y0 + 1):
        for xx in (x0, x0 + 1):
            if 0 <= yy < h and 0 <= xx < w:
                total += (1 - abs(y - yy)) * (1 - abs(x - xx)) * fmap[c, yy, xx]
    return total


def scalar_roi_align(fmap, box, out_size, ratio, stride):
    x0, y0, x1, y1 = (v / stride for v in box)
    bw, bh = (x1 - x0) / out_size, (y1 - y0) / out_size
    out = np.zeros((fmap.shape[0], out_size, out_size))
    for c in range(fmap.shape[0]):
        for i in range(out_size):
            for j in range(out_size):
                acc = 0.0
                for si in range(ratio):
                    for sj in range(ratio):
                        y = y0 + (i + (si + 0.5) / ratio) * bh - 0.5
                        x = x0 + (j + (sj + 0.5) / ratio) * bw - 0.5
                        acc += scalar_bilinear(fmap, c, y, x)
                out[c, i, j] = acc / ratio**2
    return out
