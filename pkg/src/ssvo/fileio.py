"""Dataset and result file formats.

  * images: 8-bit grayscale PNG, intensities mapped linearly to [0, 1];
  * depth maps: .dpt — header of two big-endian uint32 (height, width)
    followed by height*width big-endian float32 values, row-major;
  * trajectories: TUM text format, one "timestamp tx ty tz qx qy qz qw"
    line per pose (camera-to-world), floats written with repr so a
    read/write cycle reproduces the text bit-exactly;
  * intrinsics: single line "fx fy cx cy" in pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, SE3Transform


class DataFormatError(ValueError):
    """Raised when a data file is malformed."""


def write_image(path, image: np.ndarray) -> None:
    """Write [H, W] floats in [0, 1] as an 8-bit grayscale PNG."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected [H, W] grayscale image, got shape {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(Path(path), format="PNG")


def read_image(path) -> np.ndarray:
    """Read a PNG as [H, W] float64 in [0, 1]; RGB inputs are averaged."""
    try:
        with Image.open(Path(path)) as img:
            arr = np.asarray(img.convert("RGB") if img.mode not in ("L", "I;16")
                             else img)
    except OSError as e:
        raise DataFormatError(f"unreadable image {path}: {e}") from e
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float64) / scale


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid in [0, 1]: the value a PNG round-trip yields."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def write_depth(path, depth: np.ndarray) -> None:
    """Write [H, W] depth as big-endian float32 with a (height, width) header."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"expected [H, W] depth map, got shape {d.shape}")
    h, w = d.shape
    with open(Path(path), "wb") as fh:
        fh.write(np.array([h, w], dtype=">u4").tobytes())
        fh.write(d.astype(">f4").tobytes())


def read_depth(path) -> np.ndarray:
    with open(Path(path), "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise DataFormatError(f"truncated depth header in {path}")
        h, w = np.frombuffer(header, dtype=">u4")
        raw = fh.read(int(h) * int(w) * 4)
        if len(raw) != int(h) * int(w) * 4:
            raise DataFormatError(f"truncated depth payload in {path}")
        return np.frombuffer(raw, dtype=">f4").astype(np.float64).reshape(int(h), int(w))


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """3x3 rotation to unit quaternion (qx, qy, qz, qw), qw >= 0."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) to 3x3 rotation."""
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class ParsedPose(SE3Transform):
    """A pose parsed from TUM text. Remembers the exact quaternion fields so
    writing it back reproduces them bitwise; any geometric operation on the
    pose returns a plain SE3Transform and drops the memo, as it must."""
    quaternion: tuple = (0.0, 0.0, 0.0, 1.0)


def write_trajectory(path, trajectory: list[tuple[float, SE3Transform]]) -> None:
    """Write (timestamp, camera-to-world pose) pairs in TUM format."""
    lines = []
    for ts, pose in trajectory:
        q = pose.quaternion if isinstance(pose, ParsedPose) \
            else rotation_to_quaternion(pose.R)
        fields = [ts, *pose.t, *q]
        lines.append(" ".join(repr(float(f)) for f in fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> list[tuple[float, SE3Transform]]:
    trajectory = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DataFormatError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
        try:
            ts, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
        except ValueError as e:
            raise DataFormatError(f"{path}:{ln}: {e}") from e
        R = quaternion_to_rotation(np.array([qx, qy, qz, qw]))
        # Renormalize against text-precision loss before the SE3 invariant check.
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        if np.linalg.det(R) < 0:
            u[:, -1] = -u[:, -1]
            R = u @ vt
        trajectory.append((ts, ParsedPose(R, np.array([tx, ty, tz]),
                                          quaternion=(qx, qy, qz, qw))))
    if not trajectory:
        raise DataFormatError(f"{path}: no poses found")
    return trajectory


def write_intrinsics(path, K: CameraIntrinsics) -> None:
    Path(path).write_text(
        f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}\n")


def read_intrinsics(path) -> CameraIntrinsics:
    text = Path(path).read_text().strip()
    parts = text.split()
    if len(parts) != 4:
        raise DataFormatError(f"{path}: expected 'fx fy cx cy', got {text!r}")
    try:
        fx, fy, cx, cy = (float(p) for p in parts)
    except ValueError as e:
        raise DataFormatError(f"{path}: {e}") from e
    return CameraIntrinsics(fx, fy, cx, cy)
