"""Convolution, affine, resampling and interpolation operators."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ConfigurationError, ContractViolation, Tensor


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> contiguous patches of shape (C, kh, kw, N, Ho, Wo)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3))


def _scatter_windows(cols: np.ndarray, out_hw: tuple[int, int], stride: int) -> np.ndarray:
    """Adjoint of ``_windows``: sum (C, kh, kw, N, Ho, Wo) patches into (N, C, Hp, Wp)."""
    c, kh, kw, n, ho, wo = cols.shape
    out = np.zeros((c, n) + out_hw)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation over an (N, Cin, H, W) batch with (Cout, Cin, kh, kw) filters.

    Patches are laid out channel-major so the whole batch is one GEMM.
    """
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ContractViolation(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractViolation("conv2d: kernel sizes must be odd")
    if stride < 1 or pad < 0 or h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ContractViolation("conv2d: invalid stride/pad for input size")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _windows(xp, kh, kw, stride).reshape(cin * kh * kw, n * ho * wo)
    wmat = w.data.reshape(cout, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(cin, kh, kw, n, ho, wo)
            gxp = _scatter_windows(dcols, xp.shape[2:], stride)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 2, pad: int = 0) -> Tensor:
    """Transposed convolution with (Cin, Cout, k, k) weights; only ``stride == 2`` is supported.

    Output size is ``(H - 1) * stride - 2 * pad + k``, i.e. exactly 2H for
    (k=2, pad=0) and (k=4, pad=1).
    """
    if stride != 2:
        raise ConfigurationError(f"conv_transpose2d supports stride 2 only, got {stride}")
    n, cin, h, wd = x.shape
    wcin, cout, kh, kw = w.shape
    if wcin != cin:
        raise ContractViolation(f"conv_transpose2d: input has {cin} channels, weight expects {wcin}")
    if kh != 2 * pad + 2 or kw != 2 * pad + 2:
        raise ConfigurationError("conv_transpose2d: kernel must equal 2*pad + 2 for exact x2 upsampling")
    hp, wp = (h - 1) * stride + kh, (wd - 1) * stride + kw
    x2 = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(cin, -1)
    wmat = w.data.reshape(cin, -1)
    cols = (wmat.T @ x2).reshape(cout, kh, kw, n, h, wd)
    outp = _scatter_windows(cols, (hp, wp), stride)
    out = outp[:, :, pad : hp - pad, pad : wp - pad] if pad else outp
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        gcols = _windows(gp, kh, kw, stride).reshape(cout * kh * kw, -1)
        gx = None
        if x.requires_grad:
            gx = (wmat @ gcols).reshape(cin, n, h, wd).transpose(1, 0, 2, 3)
        gw = (x2 @ gcols.T).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """Affine map ``x @ w.T + b`` for x of shape (N, Din) and w of shape (Dout, Din)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ContractViolation(f"linear: cannot apply weight {w.shape} to input {x.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        return (
            g @ w.data if x.requires_grad else None,
            g.T @ x.data if w.requires_grad else None,
            g.sum(axis=0) if b is not None else None,
        )

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)

    return Tensor.from_op(out, (x,), backward)


def interp_weights(coords: np.ndarray, size: int) -> np.ndarray:
    """Linear-interpolation weights of each coordinate against cells ``0..size-1``.

    Returns an array of shape ``coords.shape + (size,)``.  Neighbours that fall
    outside the grid contribute zero (zero padding), so a coordinate more than
    one cell outside the grid gets all-zero weights.
    """
    coords = np.asarray(coords, dtype=float)
    lo = np.floor(coords)
    frac = coords - lo
    lo = lo.astype(np.int64)
    weights = np.zeros(coords.shape + (size,))
    flat = weights.reshape(-1, size)
    rows = np.arange(flat.shape[0])
    for idx, wt in ((lo.ravel(), (1.0 - frac).ravel()), ((lo + 1).ravel(), frac.ravel())):
        ok = (idx >= 0) & (idx < size)
        flat[rows[ok], idx[ok]] += wt[ok]
    return weights


def bilinear_sample(fmap: Tensor, y: float, x: float) -> Tensor:
    """Bilinearly interpolate a (C, H, W) map at (y, x) in cell-index coordinates."""
    c, h, w = fmap.shape
    wy = interp_weights(np.array(y), h)
    wx = interp_weights(np.array(x), w)
    out = np.einsum("h,chw,w->c", wy, fmap.data, wx)
    return Tensor.from_op(out, (fmap,), lambda g: (np.einsum("c,h,w->chw", g, wy, wx),))
