"""Pure-numpy convolution kernels (im2col + BLAS tensordot).

All three entry points share the ceil-mode "same" geometry: for a forward
pass with stride s the output has HO = ceil(H/s) rows, the total padding is
max((HO-1)*s + k - H, 0) and the top/left share is total // 2. Callers pass
the top/left padding explicitly so the adjoint ops can reuse the exact same
geometry.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, w, stride, pt, pl, ho, wo):
    """Cross-correlate x [N,C,H,W] with w [F,C,kh,kw] -> [N,F,ho,wo]."""
    n, c, h, wid = x.shape
    f, _, kh, kw = w.shape
    pb = max((ho - 1) * stride + kh - h - pt, 0)
    pr = max((wo - 1) * stride + kw - wid - pl, 0)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_input_grad(gy, w, stride, pt, pl, h, wid):
    """Adjoint of conv2d_forward w.r.t. its input; gy is [N,F,ho,wo]."""
    n, f, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    hd = (ho - 1) * stride + 1
    wd = (wo - 1) * stride + 1
    gyd = np.zeros((n, f, hd, wd), dtype=np.float64)
    gyd[:, :, ::stride, ::stride] = gy
    ptg = kh - 1 - pt
    plg = kw - 1 - pl
    pbg = (h - 1 + kh) - (ptg + hd)
    prg = (wid - 1 + kw) - (plg + wd)
    gyp = np.pad(gyd, ((0, 0), (0, 0), (ptg, max(pbg, 0)), (plg, max(prg, 0))))
    if pbg < 0:
        gyp = gyp[:, :, : h - 1 + kh, :]
    if prg < 0:
        gyp = gyp[:, :, :, : wid - 1 + kw]
    win = sliding_window_view(gyp, (kh, kw), axis=(2, 3))
    wflip = w[:, :, ::-1, ::-1]
    gx = np.tensordot(win, wflip, axes=([1, 4, 5], [0, 2, 3]))
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2))


def conv2d_weight_grad(gy, x, stride, pt, pl, kh, kw):
    """Adjoint of conv2d_forward w.r.t. the kernel; returns [F,C,kh,kw]."""
    n, f, ho, wo = gy.shape
    _, c, h, wid = x.shape
    pb = max((ho - 1) * stride + kh - h - pt, 0)
    pr = max((wo - 1) * stride + kw - wid - pl, 0)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    gw = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(gw)
