"""Procedural scene renderer: smooth height-field surfaces with value-noise
albedo, ray-cast to exact depth, plus controllable photometric violations
(specular blobs, moving occluders) for exercising the reliability mask.

Scenes are deterministic functions of their spec. The camera looks down +z
at a surface undulating around depth d0; illumination is a headlamp at the
camera center (intensity ~ albedo / distance²), matching a light source
rigidly attached to the camera. Rendered intensities are quantized to the
8-bit grid immediately so in-memory samples equal their PNG round-trip and
corruption masks are exact at the stored precision.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .diffcore import Tensor, no_grad
from .fileio import quantize_image, write_depth, write_image, \
    write_intrinsics, write_trajectory
from .geometry import CameraIntrinsics, SE3Transform, euler_to_rotation, \
    pixel_grid, transform_compose, transform_invert
from .trainer import FrameTriplet
from .warp import inverse_warp

log = logging.getLogger(__name__)

DEPTH_TOL = 1e-6


class RenderError(RuntimeError):
    """A ray failed to hit the surface: the scene/trajectory combination is
    outside the renderer's contract."""


@dataclass(frozen=True)
class CorruptionSpec:
    """Photometric violations injected into source frames only."""
    n_specular: int = 2
    specular_radius: tuple[float, float] = (0.05, 0.10)   # fraction of width
    n_occluders: int = 1
    occluder_radius: tuple[float, float] = (0.06, 0.12)
    occluder_shade: float = 0.65


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    d0: float = 1.0
    bump_amps: tuple[float, ...] = ()
    bump_freqs: tuple[tuple[float, float], ...] = ()
    bump_phases: tuple[float, ...] = ()
    texture_octaves: int = 4
    texture_freq: float = 2.2     # lattice cells per scene unit, octave 0
    texture_contrast: float = 1.8
    headlamp: bool = True
    headlamp_strength: float = 0.8
    corruption: CorruptionSpec | None = None

    def __post_init__(self):
        if not (len(self.bump_amps) == len(self.bump_freqs) == len(self.bump_phases)):
            raise ValueError("bump parameter tuples must have equal length")
        if len(self.bump_amps) > 8:
            raise ValueError("at most 8 surface bumps are supported")

    @staticmethod
    def random(seed: int, d0: float = 1.0, corruption: CorruptionSpec | None = None,
               headlamp: bool = True) -> "SceneSpec":
        """A random scene: 3-8 cosine bumps with total amplitude 0.12*d0
        (gentle slopes keep every ray's intersection unique) and fresh
        texture."""
        rng = np.random.default_rng([seed, 0xBEEF])
        n = int(rng.integers(3, 9))
        amps = rng.uniform(0.4, 1.0, n)
        amps = amps / amps.sum() * 0.12 * d0
        freqs = rng.uniform(0.2, 0.6, (n, 2)) / d0 * rng.choice([-1.0, 1.0], (n, 2))
        phases = rng.uniform(0.0, 2.0 * np.pi, n)
        return SceneSpec(
            seed=seed, d0=d0,
            bump_amps=tuple(float(a) for a in amps),
            bump_freqs=tuple((float(fx), float(fy)) for fx, fy in freqs),
            bump_phases=tuple(float(p) for p in phases),
            corruption=corruption, headlamp=headlamp)


@lru_cache(maxsize=32)
def _texture_lattices(seed: int, octaves: int) -> tuple[np.ndarray, ...]:
    rng = np.random.default_rng([seed, 0x7E47])
    return tuple(rng.random((64, 64)) for _ in range(octaves))


def surface_height(spec: SceneSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Height field z = h(x, y): base plane at d0 plus cosine bumps."""
    z = np.full_like(np.asarray(x, dtype=np.float64), spec.d0)
    for a, (fx, fy), ph in zip(spec.bump_amps, spec.bump_freqs, spec.bump_phases):
        z = z + a * np.cos(2.0 * np.pi * (fx * x + fy * y) + ph)
    return z


def _bilerp_wrapped(lattice: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    size = lattice.shape[0]
    ix = np.floor(px).astype(np.int64)
    iy = np.floor(py).astype(np.int64)
    fx = px - ix
    fy = py - iy
    i0, i1 = ix % size, (ix + 1) % size
    j0, j1 = iy % size, (iy + 1) % size
    return (lattice[j0, i0] * (1 - fx) * (1 - fy) + lattice[j0, i1] * fx * (1 - fy)
            + lattice[j1, i0] * (1 - fx) * fy + lattice[j1, i1] * fx * fy)


def surface_albedo(spec: SceneSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Multi-octave value-noise albedo in [0.2, 0.95].

    Octave averaging concentrates values around the mean, so the noise is
    re-stretched about mid-gray before mapping into the albedo interval;
    without this the rendered texture is too flat to drive a photometric
    loss."""
    lattices = _texture_lattices(spec.seed, spec.texture_octaves)
    total = np.zeros_like(np.asarray(x, dtype=np.float64))
    weight_sum = 0.0
    for o, lat in enumerate(lattices):
        f = spec.texture_freq * 2.0 ** o
        w = 0.5 ** o
        total = total + w * _bilerp_wrapped(lat, x * f, y * f)
        weight_sum += w
    stretched = np.clip(0.5 + spec.texture_contrast * (total / weight_sum - 0.5),
                        0.0, 1.0)
    return 0.2 + 0.75 * stretched


def render_view(spec: SceneSpec, pose: SE3Transform, K: CameraIntrinsics,
                h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast one view. pose is camera-to-world.

    Returns (image [H, W] in [0, 1] quantized to the 8-bit grid,
    depth [H, W] camera-frame z of the surface hit, found by bisection to
    1e-6)."""
    u, v = pixel_grid(h, w)
    rays_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones(h * w)])
    d_world = pose.R @ rays_cam
    o = pose.t

    def above(lam):
        px = o[0] + lam * d_world[0]
        py = o[1] + lam * d_world[1]
        pz = o[2] + lam * d_world[2]
        return pz - surface_height(spec, px, py)

    lo = np.full(h * w, 0.05 * spec.d0)
    hi = np.full(h * w, 3.0 * spec.d0)
    if np.any(above(lo) >= 0.0) or np.any(above(hi) <= 0.0):
        raise RenderError("a ray does not bracket the surface; camera too "
                          "close to (or beyond) the height field")
    while float((hi - lo).max()) > DEPTH_TOL:
        mid = 0.5 * (lo + hi)
        below = above(mid) < 0.0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    lam = 0.5 * (lo + hi)

    hx = o[0] + lam * d_world[0]
    hy = o[1] + lam * d_world[1]
    albedo = surface_albedo(spec, hx, hy)
    if spec.headlamp:
        r2 = lam * lam * (rays_cam ** 2).sum(axis=0)
        image = np.clip(spec.headlamp_strength * albedo / r2, 0.0, 1.0)
    else:
        image = albedo
    # rays have camera z exactly 1, so lambda is the camera-frame z depth
    return quantize_image(image.reshape(h, w)), lam.reshape(h, w)


@dataclass
class GroundTruthSample:
    """A training triplet with exact supervision attached."""
    index: int                                 # target frame index
    triplet: FrameTriplet                      # sources corrupted when enabled
    depth_t: np.ndarray                        # [H, W] target z-depth
    poses: tuple[SE3Transform, SE3Transform]   # T_{t->t-1}, T_{t->t+1}
    corruption_mask: np.ndarray                # bool [H, W], target coords
    source_masks: tuple[np.ndarray, np.ndarray]  # bool [H, W] per source frame
    target_masks: tuple[np.ndarray, np.ndarray]  # per-source, target coords
    clean_sources: tuple[np.ndarray, np.ndarray]  # [H, W] uncorrupted renders


@dataclass
class DatasetBundle:
    spec: SceneSpec
    intrinsics: CameraIntrinsics
    trajectory: list[SE3Transform]             # camera-to-world per frame
    frames: list[np.ndarray]                   # clean renders [H, W]
    depths: list[np.ndarray]                   # [H, W] per frame
    samples: list[GroundTruthSample]
    dropped: int


def random_trajectory(seed: int, n_frames: int, d0: float = 1.0,
                      max_step_translation: float = 0.02,
                      max_step_rotation_deg: float = 2.0) -> list[SE3Transform]:
    """Smooth random camera walk: per-step rotation <= the cap (degrees) and
    translation <= max_step_translation * d0, z excursion bounded so the
    surface stays in depth range."""
    rng = np.random.default_rng([seed, 0x7A41])
    poses = [SE3Transform.identity()]
    vel = np.zeros(3)
    ang = np.zeros(3)
    t_cap = max_step_translation * d0
    r_cap = np.deg2rad(max_step_rotation_deg)
    for _ in range(n_frames - 1):
        vel = 0.85 * vel + rng.normal(0.0, 1.0, 3) * np.array([0.009, 0.009, 0.0035]) * d0
        norm = np.linalg.norm(vel)
        if norm > t_cap:
            vel = vel * (t_cap / norm)
        ang = 0.85 * ang + rng.normal(0.0, 1.0, 3) * np.deg2rad(0.35)
        # cap the geodesic angle of the composed rotation, not the Euler
        # vector norm (the two differ at third order, enough to overshoot)
        step_r = euler_to_rotation(*ang)
        angle = np.arccos(np.clip((np.trace(step_r) - 1.0) / 2.0, -1.0, 1.0))
        while angle > r_cap:
            ang = ang * (r_cap / angle)
            step_r = euler_to_rotation(*ang)
            angle = np.arccos(np.clip((np.trace(step_r) - 1.0) / 2.0,
                                      -1.0, 1.0))
        current = poses[-1]
        if abs((current.t + current.R @ vel)[2]) > 0.12 * d0:
            vel = vel.copy()
            vel[2] = -vel[2]
        step = SE3Transform(step_r, vel)
        poses.append(transform_compose(current, step))
    return poses


def _disc_distance(h: int, w: int, cu: float, cv: float) -> np.ndarray:
    u, v = pixel_grid(h, w)
    return np.hypot(u - cu, v - cv).reshape(h, w)


def _corrupt_source(image: np.ndarray, spec: CorruptionSpec,
                    rng: np.random.Generator) -> np.ndarray:
    """Apply specular blobs (additive, saturating) and occluder discs to one
    source frame; output is quantized."""
    h, w = image.shape
    out = image.copy()
    for _ in range(spec.n_specular):
        cu = rng.uniform(0.1 * w, 0.9 * w)
        cv = rng.uniform(0.1 * h, 0.9 * h)
        r = rng.uniform(*spec.specular_radius) * w
        dist = _disc_distance(h, w, cu, cv)
        profile = np.clip(1.0 - (dist / r) ** 2, 0.0, 1.0)
        out = np.clip(out + 1.5 * profile, 0.0, 1.0)
    for _ in range(spec.n_occluders):
        cu = rng.uniform(0.15 * w, 0.85 * w)
        cv = rng.uniform(0.15 * h, 0.85 * h)
        r = rng.uniform(*spec.occluder_radius) * w
        out = np.where(_disc_distance(h, w, cu, cv) <= r,
                       spec.occluder_shade, out)
    return quantize_image(out)


def _gray_to_rgb(image: np.ndarray) -> np.ndarray:
    return np.repeat(image[None], 3, axis=0)


def _warp_footprint(indicator: np.ndarray, depth: np.ndarray,
                    pose: SE3Transform, K: CameraIntrinsics) -> np.ndarray:
    """Target-frame pixels whose warped sample touches a flagged source pixel."""
    with no_grad():
        wr = inverse_warp(Tensor(indicator[None].astype(np.float64)),
                          Tensor(depth), pose, K)
    return (wr.synthesized.data[0] > 1e-12) & wr.valid


def generate_dataset(spec: SceneSpec, trajectory: list[SE3Transform],
                     K: CameraIntrinsics, h: int, w: int,
                     min_overlap: float = 0.3) -> DatasetBundle:
    """Render the trajectory and window it into 3-frame samples (middle frame
    is the target). Windows whose ground-truth warp covers less than
    min_overlap of the target are dropped with a warning count."""
    if len(trajectory) < 3:
        raise ValueError(f"trajectory must have at least 3 poses, got {len(trajectory)}")
    frames, depths = [], []
    for pose in trajectory:
        image, depth = render_view(spec, pose, K, h, w)
        if depth.min() < 0.5 * spec.d0 or depth.max() > 2.0 * spec.d0:
            raise RenderError(
                f"depth out of the [0.5, 2]*d0 envelope: "
                f"[{depth.min():.3f}, {depth.max():.3f}] for d0={spec.d0}")
        frames.append(image)
        depths.append(depth)

    samples: list[GroundTruthSample] = []
    dropped = 0
    for t in range(1, len(trajectory) - 1):
        rel = tuple(
            transform_compose(transform_invert(trajectory[s]), trajectory[t])
            for s in (t - 1, t + 1))
        with no_grad():
            fractions = [
                inverse_warp(Tensor(frames[s][None]), Tensor(depths[t]),
                             rel[i], K).valid.mean()
                for i, s in enumerate((t - 1, t + 1))]
        if min(fractions) < min_overlap:
            dropped += 1
            continue

        clean = (frames[t - 1], frames[t + 1])
        if spec.corruption is not None:
            corrupted = tuple(
                _corrupt_source(clean[i], spec.corruption,
                                np.random.default_rng([spec.seed, 0xC0, t, i]))
                for i in range(2))
        else:
            corrupted = clean
        source_masks = tuple(c != g for c, g in zip(corrupted, clean))
        target_masks = tuple(
            _warp_footprint(source_masks[i].astype(np.float64),
                            depths[t], rel[i], K)
            if source_masks[i].any() else np.zeros((h, w), dtype=bool)
            for i in range(2))
        corruption_mask = target_masks[0] | target_masks[1]

        triplet = FrameTriplet(
            i_prev=_gray_to_rgb(corrupted[0]),
            i_target=_gray_to_rgb(frames[t]),
            i_next=_gray_to_rgb(corrupted[1]),
            index=t)
        samples.append(GroundTruthSample(
            index=t, triplet=triplet, depth_t=depths[t], poses=rel,
            corruption_mask=corruption_mask, source_masks=source_masks,
            target_masks=target_masks, clean_sources=clean))
    if dropped:
        log.warning("dropped %d windows with ground-truth overlap < %.0f%%",
                    dropped, 100 * min_overlap)
    return DatasetBundle(spec=spec, intrinsics=K, trajectory=list(trajectory),
                         frames=frames, depths=depths, samples=samples,
                         dropped=dropped)


def _spec_summary(spec: SceneSpec) -> str:
    lines = [f"seed={spec.seed}", f"d0={spec.d0!r}",
             f"n_bumps={len(spec.bump_amps)}",
             f"texture_octaves={spec.texture_octaves}",
             f"texture_freq={spec.texture_freq!r}",
             f"headlamp={str(spec.headlamp).lower()}",
             f"headlamp_strength={spec.headlamp_strength!r}"]
    c = spec.corruption
    lines.append(f"corruption={str(c is not None).lower()}")
    if c is not None:
        lines += [f"n_specular={c.n_specular}", f"n_occluders={c.n_occluders}",
                  f"occluder_shade={c.occluder_shade!r}"]
    return "\n".join(lines) + "\n"


def write_dataset(directory, bundle: DatasetBundle) -> None:
    """Write a generated bundle in the on-disk dataset layout:

    cam.txt (intrinsics), groundtruth.txt (TUM camera-to-world trajectory,
    timestamp = frame index), frames/frame_%06d.png, depth/frame_%06d.dpt,
    samples.txt (kept target indices), gen.txt (generation parameters), and —
    when corruption is enabled — corrupt/ holding per-sample corrupted
    sources (src), source-frame deviation masks (mask) and their target-frame
    footprints (tmask)."""
    root = Path(directory)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    write_intrinsics(root / "cam.txt", bundle.intrinsics)
    write_trajectory(root / "groundtruth.txt",
                     [(float(i), pose) for i, pose in enumerate(bundle.trajectory)])
    for i, (frame, depth) in enumerate(zip(bundle.frames, bundle.depths)):
        write_image(root / "frames" / f"frame_{i:06d}.png", frame)
        write_depth(root / "depth" / f"frame_{i:06d}.dpt", depth)
    (root / "samples.txt").write_text(
        "".join(f"{s.index}\n" for s in bundle.samples))
    (root / "gen.txt").write_text(_spec_summary(bundle.spec))
    if bundle.spec.corruption is not None:
        cdir = root / "corrupt"
        cdir.mkdir(exist_ok=True)
        for s in bundle.samples:
            for i in range(2):
                src = s.triplet.i_prev if i == 0 else s.triplet.i_next
                write_image(cdir / f"src_{s.index:06d}_{i}.png", src[0])
                write_image(cdir / f"mask_{s.index:06d}_{i}.png",
                            s.source_masks[i].astype(np.float64))
                write_image(cdir / f"tmask_{s.index:06d}_{i}.png",
                            s.target_masks[i].astype(np.float64))
