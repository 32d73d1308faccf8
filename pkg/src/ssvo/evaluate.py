"""Trajectory and depth evaluation: pose-chain integration, similarity-aligned
ATE, error-vs-path-length curves, scale-invariant depth metrics, and disparity
map export.

Monocular estimates carry no metric scale, so every comparison quotients the
gauge: ATE aligns with a full similarity transform (rigid-only selectable),
error curves scale-align globally before differencing, and depth metrics
median-align the prediction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fileio import write_image
from .geometry import SE3Transform, transform_compose, transform_invert

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Trajectory:
    """World-frame camera poses with strictly increasing timestamps."""
    poses: tuple[tuple[float, SE3Transform], ...]

    def __post_init__(self):
        times = [ts for ts, _ in self.poses]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([ts for ts, _ in self.poses])

    @property
    def positions(self) -> np.ndarray:
        """[N, 3] camera centers."""
        return np.array([pose.t for _, pose in self.poses])

    def path_length(self) -> float:
        p = self.positions
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def integrate_poses(relative: list[SE3Transform],
                    timestamps=None) -> Trajectory:
    """Chain camera-motion increments into a world trajectory.

    relative[k] is the pose of camera k+1 expressed in camera k's frame, so
    P_{k+1} = P_k ∘ relative[k] starting from identity. Note the pose
    network predicts target-to-source point transforms; invert those before
    integrating."""
    poses = [SE3Transform.identity()]
    for rel in relative:
        poses.append(transform_compose(poses[-1], rel))
    if timestamps is None:
        timestamps = range(len(poses))
    return Trajectory(tuple(zip((float(t) for t in timestamps), poses)))


def trajectory_difference(trajectory: Trajectory) -> list[SE3Transform]:
    """Per-step camera-motion increments; inverse of integrate_poses."""
    out = []
    for (_, a), (_, b) in zip(trajectory.poses, trajectory.poses[1:]):
        out.append(transform_compose(transform_invert(a), b))
    return out


def match_trajectories(a: Trajectory, b: Trajectory) \
        -> tuple[Trajectory, Trajectory]:
    """Restrict both trajectories to their common timestamps (exact match),
    e.g. to compare an integrated estimate that starts mid-sequence against
    a full ground-truth track."""
    common = sorted(set(float(ts) for ts, _ in a.poses)
                    & set(float(ts) for ts, _ in b.poses))
    if not common:
        raise ValueError("trajectories share no timestamps")
    keep = set(common)
    pick = lambda tr: Trajectory(tuple(p for p in tr.poses if p[0] in keep))
    return pick(a), pick(b)


def _check_matched(estimated: Trajectory, ground_truth: Trajectory) -> None:
    if len(estimated) != len(ground_truth):
        raise ValueError(f"trajectory lengths differ: {len(estimated)} vs "
                         f"{len(ground_truth)}")
    if not np.allclose(estimated.timestamps, ground_truth.timestamps,
                       rtol=0.0, atol=1e-9):
        raise ValueError("trajectory timestamps do not match")


def _umeyama(source: np.ndarray, target: np.ndarray, with_scale: bool):
    """Least-squares similarity (s, R, t) minimizing ||s·R·x + t - y||²."""
    n = source.shape[0]
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    xs = source - mu_s
    ys = target - mu_t
    cov = ys.T @ xs / n
    u, d, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    flip = np.array([1.0, 1.0, sign])
    R = u @ np.diag(flip) @ vt
    if with_scale:
        var = (xs ** 2).sum() / n
        if var == 0.0:
            log.warning("degenerate trajectory (zero spread); scale fixed at 1")
            s = 1.0
        else:
            s = float((d * flip).sum() / var)
    else:
        s = 1.0
    t = mu_t - s * (R @ mu_s)
    return s, R, t


def ate(estimated: Trajectory, ground_truth: Trajectory,
        rigid: bool = False) -> tuple[float, Trajectory]:
    """Absolute trajectory error: position RMSE after the best similarity
    alignment of the estimate onto the ground truth (rigid=True drops the
    scale degree of freedom). Returns (rmse, aligned estimate)."""
    _check_matched(estimated, ground_truth)
    if len(estimated) < 3:
        raise ValueError("need at least 3 poses to align trajectories")
    s, R, t = _umeyama(estimated.positions, ground_truth.positions,
                       with_scale=not rigid)
    aligned = Trajectory(tuple(
        (ts, SE3Transform(R @ pose.R, s * (R @ pose.t) + t))
        for ts, pose in estimated.poses))
    residual = aligned.positions - ground_truth.positions
    rmse = float(np.sqrt((residual ** 2).sum(axis=1).mean()))
    return rmse, aligned


def rotation_angle_deg(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in degrees."""
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def pairwise_pose_errors(estimated: list[SE3Transform],
                         ground_truth: list[SE3Transform]):
    """Per-pair translation errors (after one global least-squares scale on
    the translations) and geodesic rotation errors in degrees."""
    if len(estimated) != len(ground_truth):
        raise ValueError("relative pose lists differ in length")
    te = np.array([e.t for e in estimated])
    tg = np.array([g.t for g in ground_truth])
    denom = (te ** 2).sum()
    scale = float((te * tg).sum() / denom) if denom > 0.0 else 1.0
    trans = np.linalg.norm(scale * te - tg, axis=1)
    rot = np.array([rotation_angle_deg(e.R @ g.R.T)
                    for e, g in zip(estimated, ground_truth)])
    return trans, rot


@dataclass(frozen=True)
class ErrorCurve:
    """Mean relative-transform errors bucketed by ground-truth path length."""
    lengths: tuple[float, ...]
    trans_err: tuple[float, ...]      # length units, after global scale
    rot_err_deg: tuple[float, ...]
    counts: tuple[int, ...]           # spans contributing to each bucket


def error_vs_length(estimated: Trajectory, ground_truth: Trajectory,
                    lengths=(0.1, 0.2, 0.3, 0.4, 0.5)) -> ErrorCurve:
    """For every start pose and target length L, find the first later pose
    where the accumulated ground-truth path exceeds L and compare the
    relative transforms over that span. Empty buckets are omitted from the
    curve (count 0 rows are kept out rather than reported as zero error)."""
    _check_matched(estimated, ground_truth)
    s, _, _ = _umeyama(estimated.positions, ground_truth.positions,
                       with_scale=True)
    gt_pos = ground_truth.positions
    step = np.linalg.norm(np.diff(gt_pos, axis=0), axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(step)])

    kept_lengths, kept_trans, kept_rot, kept_counts = [], [], [], []
    for length in sorted(lengths):
        trans_errs, rot_errs = [], []
        for i in range(len(ground_truth)):
            target = cumulative[i] + length
            j = int(np.searchsorted(cumulative, target, side="right"))
            if j >= len(ground_truth):
                continue
            rel_gt = transform_compose(
                transform_invert(ground_truth.poses[i][1]),
                ground_truth.poses[j][1])
            rel_est = transform_compose(
                transform_invert(estimated.poses[i][1]),
                estimated.poses[j][1])
            trans_errs.append(np.linalg.norm(s * rel_est.t - rel_gt.t))
            rot_errs.append(rotation_angle_deg(rel_est.R @ rel_gt.R.T))
        if trans_errs:
            kept_lengths.append(float(length))
            kept_trans.append(float(np.mean(trans_errs)))
            kept_rot.append(float(np.mean(rot_errs)))
            kept_counts.append(len(trans_errs))
    return ErrorCurve(tuple(kept_lengths), tuple(kept_trans),
                      tuple(kept_rot), tuple(kept_counts))


def write_error_curve(path, curve: ErrorCurve) -> None:
    """CSV with one row per bucket; errors are means over contributing spans."""
    lines = ["bucket_cm,trans_err,rot_err_deg,count"]
    for row in zip(curve.lengths, curve.trans_err, curve.rot_err_deg,
                   curve.counts):
        lines.append(f"{row[0]!r},{row[1]!r},{row[2]!r},{row[3]}")
    Path(path).write_text("\n".join(lines) + "\n")


def depth_metrics(disparity: np.ndarray, gt_depth: np.ndarray) -> dict:
    """Median-aligned depth accuracy: abs_rel, rmse, and the delta < 1.25
    inlier ratio, over pixels with positive ground truth."""
    if disparity.shape != gt_depth.shape:
        raise ValueError(f"shape mismatch: {disparity.shape} vs {gt_depth.shape}")
    valid = gt_depth > 0.0
    if not valid.any():
        raise ValueError("ground-truth depth has no positive pixels")
    gt = gt_depth[valid]
    if gt.min() == gt.max():
        log.warning("degenerate ground-truth depth (constant %g)", gt.min())
    pred = 1.0 / disparity[valid]
    pred = pred * (np.median(gt) / np.median(pred))
    ratio = np.maximum(pred / gt, gt / pred)
    return {
        "abs_rel": float(np.mean(np.abs(pred - gt) / gt)),
        "rmse": float(np.sqrt(np.mean((pred - gt) ** 2))),
        "delta_1_25": float(np.mean(ratio < 1.25)),
    }


def export_disparity(disparity: np.ndarray, out_prefix) -> dict:
    """Write a disparity map as out_prefix.png (min-max normalized to 8-bit;
    a constant map renders as black), out_prefix.npy (raw float64, bit-exact
    round-trip), and out_prefix.txt recording the normalization range."""
    prefix = Path(out_prefix)
    lo, hi = float(disparity.min()), float(disparity.max())
    normalized = np.zeros_like(disparity) if hi == lo \
        else (disparity - lo) / (hi - lo)
    png = prefix.with_suffix(".png")
    raw = prefix.with_suffix(".npy")
    sidecar = prefix.with_suffix(".txt")
    write_image(png, normalized)
    np.save(raw, disparity)
    sidecar.write_text(f"disp_min={lo!r}\ndisp_max={hi!r}\n"
                       f"png_encoding=(disp - disp_min) / (disp_max - disp_min)\n")
    return {"png": str(png), "raw": str(raw), "sidecar": str(sidecar)}
