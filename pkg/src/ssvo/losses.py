"""Training objective: masked multi-source photometric loss, disparity
smoothness, reliability-mask regularization, and the multi-scale total.

The total over scales l, with per-scale smoothness weight lambda_s / 2^l and
mask weight lambda_e, is

    total = sum_l ( vs_l + (lambda_s / 2^l) * smooth_l + lambda_e * reg_l )

where vs_l is the photometric term, smooth_l the second-order disparity
penalty, and reg_l the sum of per-source mask cross-entropies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import NumericalError, Tensor, as_tensor
from .warp import WarpResult


class NoValidPixels(ValueError):
    """Raised when no source view leaves a single valid pixel to supervise;
    the trainer skips such samples."""


@dataclass
class LossBreakdown:
    total: Tensor                                   # scalar, graph-connected
    per_scale: list[tuple[float, float, float]]     # (vs, smooth, reg) per scale
    lambda_s: float
    lambda_e: float

    def recompose(self) -> float:
        """Recombine the logged components; must reproduce total exactly."""
        return sum(vs + self.lambda_s / 2.0 ** l * sm + self.lambda_e * rg
                   for l, (vs, sm, rg) in enumerate(self.per_scale))


def photometric_loss(target, warped: list[WarpResult],
                     masks: list | None = None) -> Tensor:
    """Mean absolute photometric residual against each warped source, summed
    over sources.

    target: Tensor[C, H, W]. masks, when given, hold one reliability map
    Tensor[H, W] in [0, 1] per source, weighting residuals per pixel. Each
    source is normalized by its own valid count (times channels) so the
    magnitude is resolution-independent; invalid pixels contribute nothing.
    """
    target = as_tensor(target)
    c = target.data.shape[0]
    if masks is not None and len(masks) != len(warped):
        raise ValueError(f"{len(masks)} masks for {len(warped)} sources")

    total = None
    any_valid = False
    for s, wr in enumerate(warped):
        if wr.synthesized.data.shape != target.data.shape:
            raise ValueError(
                f"warped source {s} shape {wr.synthesized.data.shape} "
                f"!= target shape {target.data.shape}")
        n_valid = int(wr.valid.sum())
        if n_valid == 0:
            continue
        any_valid = True
        vmask = wr.valid.astype(np.float64)
        residual = ((target - wr.synthesized) * vmask).abs()
        if masks is not None:
            residual = residual * masks[s]
        term = residual.sum() / float(n_valid * c)
        total = term if total is None else total + term
    if not any_valid:
        raise NoValidPixels("no valid pixels in any warped source")
    return total


def smoothness_loss(disparity) -> Tensor:
    """Mean L1 of second-order spatial differences of a disparity map.

    Second-order rather than first-order so planar (affine) disparity is
    free; the three stencils (d²/dx², d²/dy², mixed) are averaged over their
    own support and summed.
    """
    d = as_tensor(disparity)
    h, w = d.data.shape
    if h < 3 or w < 3:
        raise ValueError(f"disparity map too small for smoothness: {h}x{w}")
    dxx = d[:, 2:] - d[:, 1:-1] * 2.0 + d[:, :-2]
    dyy = d[2:, :] - d[1:-1, :] * 2.0 + d[:-2, :]
    dxy = d[1:, 1:] - d[1:, :-1] - d[:-1, 1:] + d[:-1, :-1]
    return dxx.abs().mean() + dyy.abs().mean() + dxy.abs().mean()


def mask_regularization(logits) -> Tensor:
    """Cross-entropy between each pixel's softmax pair and the constant
    "reliable" label (probability 1 on channel 0).

    logits: Tensor[2, H, W], the pre-softmax pair for one source at one
    scale. Equals ln 2 per pixel at logits (0, 0); driving channel 0 up
    strictly decreases it, which is what keeps the mask from collapsing
    to zero.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 3 or logits.data.shape[0] != 2:
        raise ValueError(f"expected logits of shape (2, H, W), got {logits.data.shape}")
    l0 = logits[0]
    l1 = logits[1]
    m = Tensor(np.maximum(l0.data, l1.data))
    log_denom = ((l0 - m).exp() + (l1 - m).exp()).log() + m
    return (log_denom - l0).mean()


def mask_from_logits(logits) -> Tensor:
    """Reliability value per pixel: softmax of the pair, channel 0.

    Algebraically sigmoid(l0 - l1), which is how it is computed.
    """
    logits = as_tensor(logits)
    return (logits[0] - logits[1]).sigmoid()


def total_loss(targets, warps, disparities, mask_logits=None,
               lambda_s: float = 0.5, lambda_e: float = 0.2) -> LossBreakdown:
    """Combine all terms over the scale pyramid.

    targets: per-scale target images Tensor[C, H, W];
    warps: per-scale lists of WarpResult, one per source;
    disparities: per-scale Tensor[H, W];
    mask_logits: per-scale lists of Tensor[2, H, W] per source, or None to
    train without the reliability mask.

    Raises NumericalError naming the component and scale if any term goes
    non-finite, and NoValidPixels if some scale has no supervision at all.
    """
    n_scales = len(targets)
    if not (len(warps) == len(disparities) == n_scales):
        raise ValueError("pyramid lists must have equal length")
    if mask_logits is not None and len(mask_logits) != n_scales:
        raise ValueError("mask pyramid length mismatch")

    total = None
    per_scale = []
    for l in range(n_scales):
        masks = None
        if mask_logits is not None:
            masks = [mask_from_logits(lg) for lg in mask_logits[l]]
        vs = photometric_loss(targets[l], warps[l], masks)
        smooth = smoothness_loss(disparities[l])
        if mask_logits is not None:
            reg = None
            for lg in mask_logits[l]:
                r = mask_regularization(lg)
                reg = r if reg is None else reg + r
        else:
            reg = Tensor(np.zeros(()))
        for name, term in (("vs", vs), ("smooth", smooth), ("reg", reg)):
            if not np.isfinite(term.data):
                raise NumericalError(f"non-finite {name} loss at scale {l}")
        contribution = vs + smooth * (lambda_s / 2.0 ** l) + reg * lambda_e
        total = contribution if total is None else total + contribution
        per_scale.append((float(vs.data), float(smooth.data), float(reg.data)))
    return LossBreakdown(total=total, per_scale=per_scale,
                         lambda_s=lambda_s, lambda_e=lambda_e)


def area_downsample(image: np.ndarray) -> np.ndarray:
    """Halve an image [C, H, W] (or [H, W]) by averaging 2x2 blocks."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    c, h, w = img.shape
    if h % 2 or w % 2:
        raise ValueError(f"dimensions must be even to downsample: {h}x{w}")
    out = img.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return out[0] if squeeze else out


def build_pyramid(image: np.ndarray, levels: int = 4) -> list[np.ndarray]:
    """Per-scale image pyramid [full, 1/2, ..., 1/2^(levels-1)] by repeated
    area averaging."""
    pyramid = [np.asarray(image, dtype=np.float64)]
    for _ in range(levels - 1):
        pyramid.append(area_downsample(pyramid[-1]))
    return pyramid
