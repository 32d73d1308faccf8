"""Pinhole camera model, 6-DoF pose parameterization, and dense projection.

Conventions, fixed for bit-exact tests:
  * pixel coordinates are (u, v) = (column, row), origin at the center of
    the top-left pixel;
  * depth is the camera-frame z coordinate (not distance along the ray),
    so back-projection of pixel p at depth d is d * K^-1 [u, v, 1]^T, whose
    third component is exactly d;
  * a pose 6-vector is ordered (tx, ty, tz, rx, ry, rz) with X-Y-Z intrinsic
    Euler rotation angles in radians: R = Rx(rx) @ Ry(ry) @ Rz(rz);
  * an SE3Transform maps points from its "from" frame into its "to" frame:
    X_to = R @ X_from + t. Relative poses produced by the pose network are
    target-to-source in this sense.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, as_tensor, concat


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive: fx={self.fx}, fy={self.fy}")
        for name in ("fx", "fy", "cx", "cy"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"intrinsics field {name} is not finite")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics after area-downsampling the image by an integer factor.

        A block of factor² fine pixels becomes one coarse pixel whose center
        sits at fine coordinate k*i + (k-1)/2, hence the half-pixel shift of
        the principal point.
        """
        k = float(factor)
        return CameraIntrinsics(self.fx / k, self.fy / k,
                                (self.cx - (k - 1.0) / 2.0) / k,
                                (self.cy - (k - 1.0) / 2.0) / k)


@dataclass(frozen=True)
class SE3Transform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-10:
            raise ValueError("rotation is not orthonormal within 1e-10")
        if abs(np.linalg.det(R) - 1.0) > 1e-10:
            raise ValueError("rotation determinant is not +1 within 1e-10")

    @staticmethod
    def identity() -> "SE3Transform":
        return SE3Transform(np.eye(3), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape [3] or [3, M]."""
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.R @ p + self.t
        return self.R @ p + self.t[:, None]


def transform_compose(a: SE3Transform, b: SE3Transform) -> SE3Transform:
    """The transform applying b first, then a: X -> a.R @ (b.R @ X + b.t) + a.t."""
    return SE3Transform(a.R @ b.R, a.R @ b.t + a.t)


def transform_invert(a: SE3Transform) -> SE3Transform:
    return SE3Transform(a.R.T, -(a.R.T @ a.t))


def _rotation_entries(sx, cx, sy, cy, sz, cz):
    """Row-major entries of Rx @ Ry @ Rz from per-axis sines/cosines.

    Works on floats and on graph scalars alike; only *, +, - are used.
    """
    return (
        cy * cz, -(cy * sz), sy,
        cx * sz + sx * sy * cz, cx * cz - sx * sy * sz, -(sx * cy),
        sx * sz - cx * sy * cz, sx * cz + cx * sy * sz, cx * cy,
    )


def euler_to_rotation(rx: float, ry: float, rz: float) -> np.ndarray:
    entries = _rotation_entries(np.sin(rx), np.cos(rx), np.sin(ry),
                                np.cos(ry), np.sin(rz), np.cos(rz))
    return np.array(entries, dtype=np.float64).reshape(3, 3)


def pose_vec_to_transform(v) -> SE3Transform:
    """Convert a 6-vector (tx, ty, tz, rx, ry, rz) to a rigid transform."""
    v = np.asarray(v, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"pose vector contains non-finite values: {v}")
    return SE3Transform(euler_to_rotation(v[3], v[4], v[5]), v[:3].copy())


def pose_vec_to_rt(vec: Tensor) -> tuple[Tensor, Tensor]:
    """Graph version of pose_vec_to_transform: Tensor[6] -> (R [3,3], t [3]).

    Differentiable in all six inputs; used to keep pose gradients flowing
    from the warp back into the pose network.
    """
    vec = as_tensor(vec)
    if vec.data.shape != (6,):
        raise ValueError(f"pose vector must have shape (6,), got {vec.data.shape}")
    t = vec[0:3]
    rx, ry, rz = vec[3], vec[4], vec[5]
    entries = _rotation_entries(rx.sin(), rx.cos(), ry.sin(), ry.cos(),
                                rz.sin(), rz.cos())
    rows = [e.reshape(1) for e in entries]
    return concat(rows, axis=0).reshape(3, 3), t


def transform_to_rt(T: SE3Transform) -> tuple[Tensor, Tensor]:
    """Wrap a fixed transform as constant graph nodes."""
    return Tensor(T.R), Tensor(T.t)


def project(p_t, depth: float, T: SE3Transform, K: CameraIntrinsics):
    """Project one target pixel into the source view.

    Returns ((u_s, v_s), z_s, valid). ``valid`` is False when the transformed
    point lies at or behind the source camera plane (z_s <= 1e-8); the
    returned coordinates are then meaningless but finite.

    The homogeneous point is scaled by fx/depth before the transform
    (projectively a no-op) so that the identity transform reproduces the
    input pixel bit-exactly instead of within rounding noise.
    """
    u, v = float(p_t[0]), float(p_t[1])
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    gamma = K.fx / K.fy
    ray = np.array([u - K.cx, (v - K.cy) * gamma, K.fx])
    p = T.R @ ray + (K.fx / depth) * T.t
    z_s = p[2] * (depth / K.fx)
    if z_s <= 1e-8:
        return (0.0, 0.0), z_s, False
    u_s = (K.fx / p[2]) * p[0] + K.cx
    v_s = (K.fy / p[2]) * p[1] + K.cy
    return (u_s, v_s), z_s, True


_GRID_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (u, v) coordinates of every pixel center, cached per size."""
    key = (h, w)
    if key not in _GRID_CACHE:
        v, u = np.mgrid[0:h, 0:w].astype(np.float64)
        _GRID_CACHE[key] = (u.ravel(), v.ravel())
    return _GRID_CACHE[key]


def batch_project(depth, R, t, K: CameraIntrinsics):
    """Project every pixel of a depth map into the source view.

    depth: Tensor[H, W] (strictly positive); R, t: rotation/translation as
    Tensors (graph) or arrays (constants). Returns (coords Tensor[H, W, 2],
    valid bool[H, W], z_s Tensor[1, H*W]). Validity requires z_s > 1e-8 and
    coordinates inside [0, W-1] x [0, H-1]; invalid pixels keep finite
    placeholder coordinates and contribute no gradient downstream.
    """
    depth = as_tensor(depth)
    h, w = depth.data.shape
    if np.any(depth.data <= 0):
        raise ValueError("depth map must be strictly positive")
    R = as_tensor(R)
    t = as_tensor(t)
    u, v = pixel_grid(h, w)

    # Homogeneous rays scaled by fx/depth (projectively a no-op, see
    # `project`): identity motion then reproduces the pixel grid bit-exactly.
    rays = np.stack([u - K.cx, (v - K.cy) * (K.fx / K.fy),
                     np.full(h * w, K.fx)], axis=0)
    inv_d = depth.reshape(1, h * w) ** -1.0
    p = R @ Tensor(rays) + t.reshape(3, 1) * (inv_d * K.fx)

    pz = p[2:3]
    zs = pz * (depth.reshape(1, h * w) / K.fx)
    front = zs.data[0] > 1e-8
    # Freeze the denominator at 1 for points behind the camera so the
    # division stays finite; those pixels are masked out of every loss.
    safe = front.astype(np.float64)
    z_div = pz * safe + (1.0 - safe)
    us = (K.fx / z_div) * p[0:1] + K.cx
    vs = (K.fy / z_div) * p[1:2] + K.cy

    valid = (front & (us.data[0] >= 0.0) & (us.data[0] <= w - 1.0)
             & (vs.data[0] >= 0.0) & (vs.data[0] <= h - 1.0))
    coords = concat([us.reshape(h * w, 1), vs.reshape(h * w, 1)], axis=1)
    return coords.reshape(h, w, 2), valid.reshape(h, w), zs
