"""Network-level differentiable ops: conv, transposed conv, batch norm,
paired-channel softmax.

Convolutions use ceil-mode "same" padding: output spatial size is
ceil(in/stride) and the required zero padding is split with the smaller
share on the top/left. The transposed conv is the exact adjoint of the
stride-2 conv with the same kernel, which makes the adjointness identity
<conv(x), y> == <x, conv_t(y)> testable to float64 precision.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor


def _same_pads(h: int, w: int, kh: int, kw: int, stride: int):
    ho = -(-h // stride)
    wo = -(-w // stride)
    th = max((ho - 1) * stride + kh - h, 0)
    tw = max((wo - 1) * stride + kw - w, 0)
    return ho, wo, th // 2, tw // 2


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """Cross-correlation of x [N,C,H,W] with w [F,C,kh,kw], optional bias [F]."""
    x = as_tensor(x)
    w = as_tensor(w)
    n, c, h, wid = x.data.shape
    f, cw, kh, kw = w.data.shape
    if cw != c:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {cw}")
    ho, wo, pt, pl = _same_pads(h, wid, kh, kw, stride)

    xd, wd_ = x.data, w.data
    out_data = kernels.conv2d_forward(xd, wd_, stride, pt, pl, ho, wo)

    def vjp(g):
        g = np.ascontiguousarray(g)
        return (
            kernels.conv2d_input_grad(g, wd_, stride, pt, pl, h, wid),
            kernels.conv2d_weight_grad(g, xd, stride, pt, pl, kh, kw),
        )

    out = Tensor._from_op(out_data, (x, w), vjp)
    if b is not None:
        b = as_tensor(b)
        out = out + b.reshape(1, f, 1, 1)
    return out


def conv2d_transpose(x, w, b=None, stride: int = 2) -> Tensor:
    """Adjoint of conv2d: upsamples [N,F,h,w] to [N,C,h*stride,w*stride].

    Weight layout matches the conv it is adjoint to: [F, C, kh, kw] with F
    the input channel count here.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    n, f, h, wid = x.data.shape
    fw, c, kh, kw = w.data.shape
    if fw != f:
        raise ValueError(f"channel mismatch: input has {f}, kernel expects {fw}")
    hout, wout = h * stride, wid * stride
    _, _, pt, pl = _same_pads(hout, wout, kh, kw, stride)

    xd, wd_ = x.data, w.data
    out_data = kernels.conv2d_input_grad(xd, wd_, stride, pt, pl, hout, wout)

    def vjp(g):
        g = np.ascontiguousarray(g)
        return (
            kernels.conv2d_forward(g, wd_, stride, pt, pl, h, wid),
            kernels.conv2d_weight_grad(xd, g, stride, pt, pl, kh, kw),
        )

    out = Tensor._from_op(out_data, (x, w), vjp)
    if b is not None:
        b = as_tensor(b)
        out = out + b.reshape(1, c, 1, 1)
    return out


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm over (N, H, W).

    Training mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance for the running estimate); inference
    mode uses the running buffers as constants.
    """
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    n, c, h, w = x.data.shape
    count = n * h * w
    if count == 0:
        raise ValueError("batch_norm over an empty batch")

    if training:
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        diff = x - mu
        var = (diff * diff).mean(axis=(0, 2, 3), keepdims=True)
        normalized = diff * (var + eps) ** -0.5
        bessel = count / (count - 1) if count > 1 else 1.0
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * bessel * var.data.reshape(c)
    else:
        mu = running_mean.reshape(1, c, 1, 1)
        scale = 1.0 / np.sqrt(running_var.reshape(1, c, 1, 1) + eps)
        normalized = (x - mu) * scale
    return normalized * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)


def softmax_pairs(x) -> Tensor:
    """Softmax over each consecutive channel pair of [N,C,H,W], per pixel.

    Channels (0,1) form one pair, (2,3) the next, and so on. Stabilized by
    subtracting the pairwise max (a constant shift, so gradients are exact).
    """
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    if c % 2 != 0:
        raise ValueError(f"channel count must be even, got {c}")
    a = x[:, 0::2]
    b = x[:, 1::2]
    m = Tensor(np.maximum(a.data, b.data))
    ea = (a - m).exp()
    eb = (b - m).exp()
    denom = ea + eb
    pa = ea / denom
    pb = eb / denom
    k = c // 2
    stacked = [pa.reshape(n, k, 1, h, w), pb.reshape(n, k, 1, h, w)]
    from .tensor import concat

    return concat(stacked, axis=2).reshape(n, c, h, w)
