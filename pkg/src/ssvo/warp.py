"""Differentiable view synthesis: warp a source image into the target view
through a predicted depth map and relative pose.

The warp is a gather: every target pixel is projected into the source view
and the source image is sampled there bilinearly. Out-of-view or
behind-camera pixels are invalidated outright (value 0, validity 0) rather
than clamped, so they contribute neither loss nor gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, as_tensor, gather_hw
from .geometry import (
    CameraIntrinsics,
    SE3Transform,
    batch_project,
    pose_vec_to_rt,
    transform_to_rt,
)


@dataclass
class WarpResult:
    synthesized: Tensor     # [C, H, W]; zero at invalid pixels
    valid: np.ndarray       # bool [H, W]
    coords: Tensor          # [H, W, 2] continuous source coordinates


def bilinear_sample(source, coords) -> tuple[Tensor, np.ndarray]:
    """Sample source [C, H, W] at coords [H', W', 2] ((u, v) per pixel).

    Returns ([C, H', W'] Tensor, valid bool [H', W']). The value is the
    convex combination of the four integer neighbors; it is differentiable
    in both the source intensities and the coordinates. Samples needing a
    neighbor outside the image are invalid and come back exactly zero.
    """
    source = as_tensor(source)
    coords = as_tensor(coords)
    c, h, w = source.data.shape
    ho, wo, two = coords.data.shape
    if two != 2:
        raise ValueError(f"coords last dimension must be 2, got {two}")
    if not np.all(np.isfinite(coords.data)):
        raise ValueError("sampling coordinates contain non-finite values")

    flat = coords.reshape(ho * wo, 2)
    x = flat[:, 0]
    y = flat[:, 1]
    xd, yd = x.data, y.data
    valid = (xd >= 0.0) & (xd <= w - 1.0) & (yd >= 0.0) & (yd <= h - 1.0)

    # Floor indices, clipped so x0+1/y0+1 stay addressable; at the exact
    # right/bottom edge the weight shifts fully onto the +1 neighbor.
    x0 = np.clip(np.floor(xd), 0, w - 2).astype(np.intp)
    y0 = np.clip(np.floor(yd), 0, h - 2).astype(np.intp)

    wx1 = x - x0
    wx0 = 1.0 - wx1
    wy1 = y - y0
    wy0 = 1.0 - wy1

    base = y0 * w + x0
    g00 = gather_hw(source, base)
    g01 = gather_hw(source, base + 1)
    g10 = gather_hw(source, base + w)
    g11 = gather_hw(source, base + w + 1)

    mask = valid.astype(np.float64)
    out = (g00 * (wx0 * wy0) + g01 * (wx1 * wy0)
           + g10 * (wx0 * wy1) + g11 * (wx1 * wy1)) * mask
    return out.reshape(c, ho, wo), valid.reshape(ho, wo)


def inverse_warp(source, depth, pose, K: CameraIntrinsics) -> WarpResult:
    """Synthesize the target view from a source image.

    source: Tensor[C, H, W]; depth: Tensor[H, W] target-view depth (positive);
    pose: target-to-source motion, either a Tensor 6-vector
    (tx, ty, tz, rx, ry, rz) kept in the graph or a fixed SE3Transform.
    """
    source = as_tensor(source)
    depth = as_tensor(depth)
    if isinstance(pose, SE3Transform):
        r, t = transform_to_rt(pose)
    else:
        r, t = pose_vec_to_rt(pose)

    coords, proj_valid, _ = batch_project(depth, r, t, K)
    sampled, sample_valid = bilinear_sample(source, coords)
    valid = proj_valid & sample_valid
    # Behind-camera pixels can still land inside the frame; zero those too.
    synthesized = sampled * valid.astype(np.float64)
    return WarpResult(synthesized=synthesized, valid=valid, coords=coords)
