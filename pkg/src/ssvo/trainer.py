"""Joint training of the disparity and pose/reliability networks.

Each iteration samples a batch of 3-frame triplets, predicts per-target
disparity pyramids and per-pair 6-DoF motion, synthesizes the target from
both source frames at every scale by inverse warping, and descends the
combined photometric + smoothness + mask-regularization objective with a
single Adam optimizer over both networks jointly.

Runs are deterministic: given the same config and seed, the loss trace and
all checkpoints are bitwise identical (single-threaded numerics assumed).
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import AdamState, Tensor, adam_step, eval_with_gradients, \
    load_checkpoint, no_grad, save_checkpoint
from .fileio import read_depth, read_image, read_intrinsics, read_trajectory
from .geometry import CameraIntrinsics, SE3Transform, transform_compose, \
    transform_invert
from .losses import NoValidPixels, build_pyramid, mask_from_logits, total_loss
from .models import DispNet, DispNetConfig, PoseExpNet, PoseExpNetConfig, \
    _check_dims, usable_scales
from .warp import inverse_warp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    train_dir: str
    out_dir: str
    val_dir: str | None = None
    height: int = 32
    width: int = 104
    base_channels: int = 8
    sequence_length: int = 3
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_s: float = 0.5
    lambda_e: float = 0.2
    use_mask: bool = True
    iterations: int = 2000
    seed: int = 0
    val_interval: int = 50
    val_triplets: int = 32
    checkpoint_interval: int = 1000

    def __post_init__(self):
        _check_dims(self.height, self.width)
        if self.sequence_length != 3:
            raise ValueError("only 3-frame sequences are supported")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.lambda_s < 0.0 or self.lambda_e < 0.0:
            raise ValueError("loss weights must be non-negative")
        if self.val_interval < 1 or self.checkpoint_interval < 1:
            raise ValueError("intervals must be >= 1")
        if self.val_dir is not None and \
                Path(self.val_dir).resolve() == Path(self.train_dir).resolve():
            raise ValueError("train and validation splits must be disjoint")


_BOOL_WORDS = {"true": True, "false": False}


def config_to_text(config: TrainConfig) -> str:
    """Flat key=value serialization (the CLI config-file format; also embedded
    in checkpoints)."""
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if v is None:
            v = ""
        elif isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict:
    """Parse key=value lines into a {field: typed value} dict; unknown keys
    and malformed lines raise ValueError."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out: dict = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in types:
            raise ValueError(f"line {ln}: unknown config key {key!r}")
        t = types[key]
        if t == "int":
            out[key] = int(value)
        elif t == "float":
            out[key] = float(value)
        elif t == "bool":
            if value.lower() not in _BOOL_WORDS:
                raise ValueError(f"line {ln}: {key} must be true or false")
            out[key] = _BOOL_WORDS[value.lower()]
        elif t == "str | None":
            out[key] = value or None
        else:
            out[key] = value
    return out


@dataclass
class FrameTriplet:
    """Three consecutive frames, middle frame the reconstruction target.
    Each image is [3, H, W] float in [0, 1]."""
    i_prev: np.ndarray
    i_target: np.ndarray
    i_next: np.ndarray
    index: int   # frame index of the target within its sequence

    def __post_init__(self):
        shapes = {self.i_prev.shape, self.i_target.shape, self.i_next.shape}
        if len(shapes) != 1:
            raise ValueError(f"triplet frames differ in shape: {shapes}")
        if self.i_target.ndim != 3 or self.i_target.shape[0] != 3:
            raise ValueError(f"expected [3, H, W] frames, got {self.i_target.shape}")


@dataclass
class TripletStore:
    """An indexed dataset of triplets plus whatever ground truth the source
    directory carried (trajectory, depth, corruption masks)."""
    directory: str
    height: int
    width: int
    intrinsics: CameraIntrinsics
    triplets: list[FrameTriplet]
    n_frames: int
    trajectory: list[SE3Transform] | None = None
    gt_poses: list[tuple[SE3Transform, SE3Transform]] | None = None
    gt_depths: list[np.ndarray] | None = None
    corruption_masks: list[tuple[np.ndarray, np.ndarray]] | None = None


def _area_resize(image: np.ndarray, h: int, w: int) -> np.ndarray:
    """Downscale by integer-factor area averaging; identity when already at
    target size."""
    h0, w0 = image.shape[-2:]
    if (h0, w0) == (h, w):
        return image
    if h0 % h or w0 % w or h0 // h != w0 // w:
        raise ValueError(f"cannot area-resize {h0}x{w0} to {h}x{w}: "
                         f"factor must be a single positive integer")
    f = h0 // h
    lead = image.shape[:-2]
    return image.reshape(*lead, h, f, w, f).mean(axis=(-3, -1))


def _resize_factor(shape: tuple[int, int], h: int, w: int) -> int:
    h0, w0 = shape
    if h0 % h or w0 % w or h0 // h != w0 // w:
        raise ValueError(f"frames are {h0}x{w0}; cannot area-resize to {h}x{w}")
    return h0 // h


def _gray3(image: np.ndarray) -> np.ndarray:
    return np.repeat(image[None], 3, axis=0)


def load_dataset(directory, height: int, width: int) -> TripletStore:
    """Load a dataset directory into a triplet store at the given resolution.

    Accepts the full synthetic layout (frames/, depth/, groundtruth.txt,
    corrupt/, samples.txt) or a bare directory of PNG frames plus cam.txt.
    Intensities are scaled to [0, 1]; larger frames are reduced by integer
    area averaging with intrinsics rescaled to match.
    """
    root = Path(directory)
    if not (root / "cam.txt").is_file():
        raise FileNotFoundError(f"missing intrinsics file {root / 'cam.txt'}")
    frame_dir = root / "frames" if (root / "frames").is_dir() else root
    paths = sorted(frame_dir.glob("*.png"))
    if len(paths) < 3:
        raise ValueError(f"need at least 3 frames, found {len(paths)} "
                         f"in {frame_dir}")
    raw = [read_image(p) for p in paths]
    factor = _resize_factor(raw[0].shape, height, width)
    frames = [_gray3(_area_resize(img, height, width)) for img in raw]
    K = read_intrinsics(root / "cam.txt").scaled(factor)

    n = len(frames)
    if (root / "samples.txt").is_file():
        targets = [int(s) for s in (root / "samples.txt").read_text().split()]
        bad = [t for t in targets if not 1 <= t <= n - 2]
        if bad:
            raise ValueError(f"samples.txt lists non-interior targets {bad}")
    else:
        targets = list(range(1, n - 1))

    corrupt = root / "corrupt"
    corruption_masks = None
    triplets = []
    if corrupt.is_dir():
        corruption_masks = []
        for t in targets:
            sources = []
            masks = []
            for i in range(2):
                src = read_image(corrupt / f"src_{t:06d}_{i}.png")
                sources.append(_gray3(_area_resize(src, height, width)))
                tm = read_image(corrupt / f"tmask_{t:06d}_{i}.png")
                masks.append(_area_resize(tm, height, width) > 0.0)
            triplets.append(FrameTriplet(sources[0], frames[t], sources[1], t))
            corruption_masks.append((masks[0], masks[1]))
    else:
        triplets = [FrameTriplet(frames[t - 1], frames[t], frames[t + 1], t)
                    for t in targets]

    trajectory = None
    gt_poses = None
    if (root / "groundtruth.txt").is_file():
        stamped = read_trajectory(root / "groundtruth.txt")
        if len(stamped) != n:
            raise ValueError(f"groundtruth.txt has {len(stamped)} poses "
                             f"for {n} frames")
        trajectory = [pose for _, pose in stamped]
        gt_poses = [
            (transform_compose(transform_invert(trajectory[t - 1]), trajectory[t]),
             transform_compose(transform_invert(trajectory[t + 1]), trajectory[t]))
            for t in targets]

    gt_depths = None
    if (root / "depth").is_dir():
        gt_depths = [_area_resize(read_depth(root / "depth" / f"frame_{t:06d}.dpt"),
                                  height, width)
                     for t in targets]

    return TripletStore(directory=str(directory), height=height, width=width,
                        intrinsics=K, triplets=triplets, n_frames=n,
                        trajectory=trajectory, gt_poses=gt_poses,
                        gt_depths=gt_depths, corruption_masks=corruption_masks)


# -- forward/loss plumbing ----------------------------------------------------


def _build_networks(config: TrainConfig) -> tuple[DispNet, PoseExpNet]:
    disp = DispNet(DispNetConfig(base_channels=config.base_channels,
                                 height=config.height, width=config.width),
                   seed=config.seed)
    pose = PoseExpNet(PoseExpNetConfig(base_channels=config.base_channels,
                                       height=config.height, width=config.width),
                      seed=config.seed + 1)
    return disp, pose


def _merged_params(disp: DispNet, pose: PoseExpNet):
    params = {f"disp.{k}": v for k, v in disp.params.items()}
    params.update({f"pose.{k}": v for k, v in pose.params.items()})
    buffers = {f"disp.{k}": v for k, v in disp.buffers.items()}
    buffers.update({f"pose.{k}": v for k, v in pose.buffers.items()})
    return params, buffers


def _split_and_load(disp: DispNet, pose: PoseExpNet, params, buffers) -> None:
    for net, prefix in ((disp, "disp."), (pose, "pose.")):
        net.load_params(
            {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)},
            {k[len(prefix):]: v for k, v in buffers.items() if k.startswith(prefix)})


def _pyramids(store: TripletStore, n_scales: int) -> dict:
    """index -> (target pyramid as Tensors, (prev, next) pyramids as Tensors)."""
    out = {}
    for trip in store.triplets:
        tgt = [Tensor(x) for x in build_pyramid(trip.i_target, n_scales)]
        srcs = tuple([Tensor(x) for x in build_pyramid(img, n_scales)]
                     for img in (trip.i_prev, trip.i_next))
        out[trip.index] = (tgt, srcs)
    return out


def _batch_loss(triplets, pyramids, disp, pose, k_pyr, config, n_scales,
                training):
    """Forward a batch and average per-sample totals.

    Returns (total Tensor or None, per-scale component means [S, 3], n_used);
    samples with no valid warp pixels are dropped, and None is returned when
    the whole batch is unusable.
    """
    targets = Tensor(np.stack([t.i_target for t in triplets]))
    nine = Tensor(np.stack(
        [np.concatenate([t.i_target, t.i_prev, t.i_next]) for t in triplets]))
    disparities = disp.forward(targets, training)
    poses, logits = pose.forward(nine, training)

    total = None
    comps = np.zeros((n_scales, 3))
    used = 0
    for b, trip in enumerate(triplets):
        tgt_pyr, src_pyrs = pyramids[trip.index]
        disps_b = [disparities[l][b, 0] for l in range(n_scales)]
        warps = []
        for l in range(n_scales):
            depth_l = disps_b[l] ** -1.0
            warps.append([inverse_warp(src_pyrs[s][l], depth_l,
                                       poses[b, 6 * s:6 * s + 6], k_pyr[l])
                          for s in range(2)])
        mask_logits = None
        if config.use_mask:
            mask_logits = [[logits[l][b, 2 * s:2 * s + 2] for s in range(2)]
                           for l in range(n_scales)]
        try:
            lb = total_loss(tgt_pyr[:n_scales], warps, disps_b, mask_logits,
                            config.lambda_s, config.lambda_e)
        except NoValidPixels:
            continue
        total = lb.total if total is None else total + lb.total
        comps += np.asarray(lb.per_scale)
        used += 1
    if used == 0:
        return None, comps, 0
    return total * (1.0 / used), comps / used, used


def _validate(store, pyramids, disp, pose, k_pyr, config, n_scales):
    """Mean loss over the fixed validation subset, inference mode."""
    subset = store.triplets[:config.val_triplets]
    weighted = 0.0
    comps = np.zeros((n_scales, 3))
    used = 0
    with no_grad():
        for i in range(0, len(subset), config.batch_size):
            batch = subset[i:i + config.batch_size]
            total, c, n = _batch_loss(batch, pyramids, disp, pose, k_pyr,
                                      config, n_scales, training=False)
            if total is not None:
                weighted += float(total.data) * n
                comps += c * n
                used += n
    if used == 0:
        return float("nan"), comps
    return weighted / used, comps / used


# -- training loops -----------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: str
    train_log: str
    val_log: str | None
    iterations: int
    skipped_batches: int
    initial_val_total: float | None
    final_val_total: float | None


def _csv_header(n_scales: int) -> str:
    cols = ["iteration", "total"]
    for name in ("vs", "smooth", "reg"):
        cols += [f"{name}_{l}" for l in range(n_scales)]
    return ",".join(cols)


def _csv_row(iteration: int, total: float, comps: np.ndarray) -> str:
    fields = [str(iteration), repr(float(total))]
    for col in range(3):
        fields += [repr(float(v)) for v in comps[:, col]]
    return ",".join(fields)


def _save(path, disp, pose, config, optimizer) -> None:
    params, buffers = _merged_params(disp, pose)
    save_checkpoint(path, params, buffers, config_to_text(config), optimizer)


def _fit(config: TrainConfig, disp: DispNet, pose: PoseExpNet,
         optimizer: AdamState, header_lines: list[str]) -> TrainResult:
    store = load_dataset(config.train_dir, config.height, config.width)
    val_store = None
    if config.val_dir is not None:
        val_store = load_dataset(config.val_dir, config.height, config.width)

    n_scales = usable_scales(config.height, config.width)
    k_pyr = [store.intrinsics.scaled(2 ** l) for l in range(n_scales)]
    pyramids = _pyramids(store, n_scales)
    val_pyramids = _pyramids(val_store, n_scales) if val_store else None
    params, _ = _merged_params(disp, pose)

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_log = out / "train_log.csv"
    val_log = out / "val_log.csv" if val_store else None
    final_path = out / "checkpoint_final.ssvo"

    rng = np.random.default_rng([config.seed, 0x0EDA])
    queue: list[int] = []
    skipped = 0
    init_val = final_val = None

    def run_validation(iteration, vf):
        nonlocal init_val, final_val
        v, c = _validate(val_store, val_pyramids, disp, pose, k_pyr, config,
                         n_scales)
        vf.write(_csv_row(iteration, v, c) + "\n")
        vf.flush()
        if init_val is None:
            init_val = v
        final_val = v
        log.info("iteration %d: validation loss %.6f", iteration, v)

    with open(train_log, "w") as tf:
        vf = open(val_log, "w") if val_log else None
        try:
            for line in header_lines:
                tf.write(f"# {line}\n")
                if vf:
                    vf.write(f"# {line}\n")
            tf.write(_csv_header(n_scales) + "\n")
            if vf:
                vf.write(_csv_header(n_scales) + "\n")

            for it in range(config.iterations):
                if vf and it % config.val_interval == 0:
                    run_validation(it, vf)
                while len(queue) < config.batch_size:
                    queue.extend(rng.permutation(len(store.triplets)).tolist())
                batch = [store.triplets[queue.pop(0)]
                         for _ in range(config.batch_size)]
                total, comps, _ = _batch_loss(batch, pyramids, disp, pose,
                                              k_pyr, config, n_scales,
                                              training=True)
                if total is None:
                    skipped += 1
                    continue
                grads = eval_with_gradients(total, params)
                adam_step(params, grads, optimizer)
                tf.write(_csv_row(it, float(total.data), comps) + "\n")
                tf.flush()
                done = it + 1
                if done % config.checkpoint_interval == 0 \
                        and done < config.iterations:
                    _save(out / f"checkpoint_{done:06d}.ssvo", disp, pose,
                          config, optimizer)
            if vf:
                run_validation(config.iterations, vf)
        finally:
            if vf:
                vf.close()

    _save(final_path, disp, pose, config, optimizer)
    if skipped:
        log.warning("skipped %d batches with no valid warp pixels", skipped)
    return TrainResult(checkpoint_path=str(final_path),
                       train_log=str(train_log),
                       val_log=str(val_log) if val_log else None,
                       iterations=config.iterations, skipped_batches=skipped,
                       initial_val_total=init_val, final_val_total=final_val)


def train(config: TrainConfig) -> TrainResult:
    """Train both networks from scratch per the config."""
    disp, pose = _build_networks(config)
    params, _ = _merged_params(disp, pose)
    optimizer = AdamState(params, lr=config.learning_rate,
                          beta1=config.beta1, beta2=config.beta2)
    return _fit(config, disp, pose, optimizer, header_lines=[])


def finetune(checkpoint_path, config: TrainConfig) -> TrainResult:
    """Continue training from a checkpoint on a new dataset with a fresh
    optimizer; the source checkpoint hash is recorded in the log headers."""
    params, buffers, text, _ = load_checkpoint(checkpoint_path)
    saved = parse_config_text(text)
    for key in ("height", "width", "base_channels", "sequence_length"):
        if saved.get(key) != getattr(config, key):
            raise ValueError(
                f"architecture mismatch: checkpoint has {key}="
                f"{saved.get(key)}, config wants {getattr(config, key)}")
    disp, pose = _build_networks(config)
    _split_and_load(disp, pose, params, buffers)
    merged, _ = _merged_params(disp, pose)
    optimizer = AdamState(merged, lr=config.learning_rate,
                          beta1=config.beta1, beta2=config.beta2)
    digest = hashlib.sha256(Path(checkpoint_path).read_bytes()).hexdigest()
    return _fit(config, disp, pose, optimizer,
                header_lines=[f"finetune_from=sha256:{digest}"])


# -- checkpoint-driven inference ----------------------------------------------


def load_networks(checkpoint_path) -> tuple[DispNet, PoseExpNet, TrainConfig]:
    """Rebuild both networks from a training checkpoint."""
    params, buffers, text, _ = load_checkpoint(checkpoint_path)
    config = TrainConfig(**parse_config_text(text))
    disp, pose = _build_networks(config)
    _split_and_load(disp, pose, params, buffers)
    return disp, pose, config


def infer_disparity(disp: DispNet, image: np.ndarray) -> np.ndarray:
    """Full-resolution disparity for one [3, H, W] image, inference mode."""
    with no_grad():
        pyramid = disp.forward(Tensor(image[None]), training=False)
    return pyramid[0].data[0, 0]


def infer_pose(pose: PoseExpNet, triplet: FrameTriplet) \
        -> tuple[np.ndarray, np.ndarray]:
    """Pose vectors (target->prev, target->next) for one triplet."""
    nine = np.concatenate([triplet.i_target, triplet.i_prev, triplet.i_next])
    with no_grad():
        poses, _ = pose.forward(Tensor(nine[None]), training=False)
    return poses.data[0, 0:6].copy(), poses.data[0, 6:12].copy()


def infer_masks(pose: PoseExpNet, triplet: FrameTriplet) \
        -> tuple[np.ndarray, np.ndarray]:
    """Full-resolution reliability maps (one per source) for one triplet."""
    nine = np.concatenate([triplet.i_target, triplet.i_prev, triplet.i_next])
    with no_grad():
        _, logits = pose.forward(Tensor(nine[None]), training=False)
        maps = tuple(mask_from_logits(logits[0][0, 2 * s:2 * s + 2]).data
                     for s in range(2))
    return maps
