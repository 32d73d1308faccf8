"""Command-line entry point.

Numerics configuration happens before numpy loads: --threads is pre-scanned
from argv and exported to the BLAS thread-count variables, so heavy imports
stay inside the command handlers. --threads 1 is the bitwise-reproducible
reference mode used by the determinism guarantees.

Exit codes: 0 success, 2 bad configuration or arguments, 3 I/O failure,
4 numerical failure. Failures print one line to stderr of the form
`[config-error] message` / `[io-error] ...` / `[numerical-error] ...`.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _prescan_threads(argv: list[str]) -> None:
    """Export BLAS thread counts before anything imports numpy."""
    value = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.partition("=")[2]
    if value is not None and value.isdigit() and int(value) > 0:
        for var in _THREAD_VARS:
            os.environ[var] = value


def _setup_logging() -> None:
    level = os.environ.get("SSVO_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    logging.basicConfig(stream=sys.stderr,
                        level=levels.get(level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="ssvo",
        description="Unsupervised single-view depth and ego-motion: synthetic "
                    "data generation, training, inference, and evaluation.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, metavar="N",
                        help="BLAS thread count; 1 = bitwise-reproducible "
                             "reference mode")

    p = sub.add_parser("synth-gen", parents=[common], formatter_class=fmt,
                       help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0, help="scene and path seed")
    p.add_argument("--frames", type=int, default=40, help="trajectory length")
    p.add_argument("--height", type=int, default=32, help="image height")
    p.add_argument("--width", type=int, default=104, help="image width")
    p.add_argument("--d0", type=float, default=1.0, help="base surface depth")
    p.add_argument("--corrupt", action="store_true",
                   help="add specular blobs and occluders to source frames")
    p.add_argument("--no-headlamp", action="store_true",
                   help="render plain albedo without camera-attached light")
    p.add_argument("--min-overlap", type=float, default=0.3,
                   help="drop windows whose warp overlap is below this")

    for name, description in (("train", "train both networks from scratch"),
                              ("finetune", "continue from a checkpoint")):
        p = sub.add_parser(name, parents=[common], formatter_class=fmt,
                           help=description)
        if name == "finetune":
            p.add_argument("--from", dest="from_checkpoint", required=True,
                           metavar="CKPT", help="source checkpoint")
        p.add_argument("--config", default=None,
                       help="key=value config file; flags override it")
        p.add_argument("--train-dir", default=None, help="training dataset")
        p.add_argument("--val-dir", default=None, help="validation dataset")
        p.add_argument("--out-dir", default=None,
                       help="checkpoints and logs go here")
        p.add_argument("--height", type=int, default=None, help="input height")
        p.add_argument("--width", type=int, default=None, help="input width")
        p.add_argument("--base-channels", type=int, default=None,
                       help="width multiplier for both networks")
        p.add_argument("--batch-size", type=int, default=None,
                       help="triplets per iteration")
        p.add_argument("--learning-rate", type=float, default=None,
                       help="Adam learning rate")
        p.add_argument("--lambda-s", type=float, default=None,
                       help="smoothness weight")
        p.add_argument("--lambda-e", type=float, default=None,
                       help="mask regularization weight")
        p.add_argument("--no-mask", dest="use_mask", action="store_const",
                       const=False, default=None,
                       help="train without the reliability mask")
        p.add_argument("--iterations", type=int, default=None,
                       help="optimization steps")
        p.add_argument("--seed", type=int, default=None,
                       help="controls init and batch order")
        p.add_argument("--val-interval", type=int, default=None,
                       help="iterations between validation passes")
        p.add_argument("--checkpoint-interval", type=int, default=None,
                       help="iterations between checkpoints")

    p = sub.add_parser("infer-depth", parents=[common], formatter_class=fmt,
                       help="export a disparity map for one image")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--out", required=True,
                   help="output prefix for .png/.npy/.txt")

    p = sub.add_parser("infer-pose", parents=[common], formatter_class=fmt,
                       help="integrate predicted motion into a trajectory")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output TUM trajectory file")

    p = sub.add_parser("eval-ate", parents=[common], formatter_class=fmt,
                       help="absolute trajectory error after alignment")
    p.add_argument("--est", required=True, help="estimated TUM trajectory")
    p.add_argument("--gt", required=True, help="ground-truth TUM trajectory")
    p.add_argument("--rigid", action="store_true",
                   help="align without the scale degree of freedom")
    p.add_argument("--out", default=None,
                   help="optionally write the aligned estimate here")

    p = sub.add_parser("eval-curve", parents=[common], formatter_class=fmt,
                       help="translation/rotation error vs path length")
    p.add_argument("--est", required=True, help="estimated TUM trajectory")
    p.add_argument("--gt", required=True, help="ground-truth TUM trajectory")
    p.add_argument("--lengths", default="0.1,0.2,0.3,0.4,0.5",
                   help="comma-separated path-length buckets")
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser("eval-depth", parents=[common], formatter_class=fmt,
                       help="median-aligned depth metrics over a dataset")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--dataset", required=True,
                   help="dataset directory with ground-truth depth")
    p.add_argument("--out", default=None, help="optionally write metrics here")

    p = sub.add_parser("gradcheck", parents=[common], formatter_class=fmt,
                       help="finite-difference verification of all gradients")
    p.add_argument("--seeds", type=int, default=20,
                   help="random seeds per operation")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    return parser


# -- command handlers (heavy imports stay local) -------------------------------


def _cmd_synth_gen(args) -> int:
    from .geometry import CameraIntrinsics
    from .synthdata import CorruptionSpec, SceneSpec, generate_dataset, \
        random_trajectory, write_dataset
    corruption = CorruptionSpec() if args.corrupt else None
    spec = SceneSpec.random(args.seed, d0=args.d0, corruption=corruption,
                            headlamp=not args.no_headlamp)
    k = CameraIntrinsics(fx=0.9 * args.width, fy=0.9 * args.width,
                         cx=(args.width - 1) / 2, cy=(args.height - 1) / 2)
    trajectory = random_trajectory(args.seed, args.frames, d0=args.d0)
    bundle = generate_dataset(spec, trajectory, k, args.height, args.width,
                              min_overlap=args.min_overlap)
    write_dataset(args.out, bundle)
    print(f"wrote {len(bundle.frames)} frames, {len(bundle.samples)} samples "
          f"({bundle.dropped} dropped) to {args.out}")
    return 0


def _train_config(args):
    from .trainer import TrainConfig, parse_config_text
    values: dict = {}
    if args.config is not None:
        with open(args.config) as f:
            values.update(parse_config_text(f.read()))
    skip = {"command", "config", "threads", "from_checkpoint"}
    for key, value in vars(args).items():
        if key not in skip and value is not None:
            values[key] = value
    try:
        return TrainConfig(**values)
    except TypeError as e:
        raise ValueError(f"incomplete config: {e}") from e


def _cmd_train(args) -> int:
    from .trainer import train
    result = train(_train_config(args))
    print(f"checkpoint={result.checkpoint_path}")
    if result.final_val_total is not None:
        print(f"val_initial={result.initial_val_total!r}")
        print(f"val_final={result.final_val_total!r}")
    return 0


def _cmd_finetune(args) -> int:
    from .trainer import finetune
    result = finetune(args.from_checkpoint, _train_config(args))
    print(f"checkpoint={result.checkpoint_path}")
    if result.final_val_total is not None:
        print(f"val_initial={result.initial_val_total!r}")
        print(f"val_final={result.final_val_total!r}")
    return 0


def _cmd_infer_depth(args) -> int:
    from .evaluate import export_disparity
    from .fileio import read_image
    from .trainer import _area_resize, _gray3, infer_disparity, load_networks
    disp_net, _, config = load_networks(args.checkpoint)
    image = _gray3(_area_resize(read_image(args.image),
                                config.height, config.width))
    paths = export_disparity(infer_disparity(disp_net, image), args.out)
    print(f"wrote {paths['png']} {paths['raw']} {paths['sidecar']}")
    return 0


def _cmd_infer_pose(args) -> int:
    from .evaluate import integrate_poses
    from .fileio import write_trajectory
    from .geometry import pose_vec_to_transform, transform_invert
    from .trainer import infer_pose, load_dataset, load_networks
    _, pose_net, config = load_networks(args.checkpoint)
    store = load_dataset(args.dataset, config.height, config.width)
    targets = [t.index for t in store.triplets]
    if targets != list(range(targets[0], targets[0] + len(targets))):
        raise ValueError("dataset triplets are not contiguous; cannot chain "
                         "relative poses into a trajectory")
    increments = []
    for triplet in store.triplets:
        _, to_next = infer_pose(pose_net, triplet)
        increments.append(transform_invert(pose_vec_to_transform(to_next)))
    trajectory = integrate_poses(
        increments, timestamps=range(targets[0], targets[-1] + 2))
    write_trajectory(args.out, list(trajectory.poses))
    print(f"wrote {len(trajectory)} poses to {args.out}")
    return 0


def _load_trajectory(path):
    from .evaluate import Trajectory
    from .fileio import read_trajectory
    return Trajectory(tuple(read_trajectory(path)))


def _cmd_eval_ate(args) -> int:
    from .evaluate import ate, match_trajectories
    from .fileio import write_trajectory
    est, gt = match_trajectories(_load_trajectory(args.est),
                                 _load_trajectory(args.gt))
    rmse, aligned = ate(est, gt, rigid=args.rigid)
    print(f"ate_rmse={rmse!r}")
    print(f"gt_path_length={gt.path_length()!r}")
    print(f"poses={len(gt)}")
    if args.out:
        write_trajectory(args.out, list(aligned.poses))
    return 0


def _cmd_eval_curve(args) -> int:
    from .evaluate import error_vs_length, match_trajectories, \
        write_error_curve
    est, gt = match_trajectories(_load_trajectory(args.est),
                                 _load_trajectory(args.gt))
    lengths = tuple(float(s) for s in args.lengths.split(","))
    curve = error_vs_length(est, gt, lengths=lengths)
    write_error_curve(args.out, curve)
    for row in zip(curve.lengths, curve.trans_err, curve.rot_err_deg,
                   curve.counts):
        print(f"bucket={row[0]:g} trans_err={row[1]!r} "
              f"rot_err_deg={row[2]!r} count={row[3]}")
    return 0


def _cmd_eval_depth(args) -> int:
    import numpy as np
    from .evaluate import depth_metrics
    from .trainer import infer_disparity, load_dataset, load_networks
    disp_net, _, config = load_networks(args.checkpoint)
    store = load_dataset(args.dataset, config.height, config.width)
    if store.gt_depths is None:
        raise FileNotFoundError(f"{args.dataset} has no depth/ directory")
    metrics = [depth_metrics(infer_disparity(disp_net, t.i_target), gt)
               for t, gt in zip(store.triplets, store.gt_depths)]
    lines = [f"{key}={float(np.mean([m[key] for m in metrics]))!r}"
             for key in ("abs_rel", "rmse", "delta_1_25")]
    print("\n".join(lines))
    if args.out:
        with open(args.out, "w") as f:
            f.write("\n".join(lines) + "\n")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import format_results, run_suite
    results = run_suite(seeds=args.seeds, base_seed=args.seed)
    print(format_results(results))
    if not all(r.ok for r in results):
        raise ArithmeticError("gradient check failed")
    return 0


_HANDLERS = {
    "synth-gen": _cmd_synth_gen,
    "train": _cmd_train,
    "finetune": _cmd_finetune,
    "infer-depth": _cmd_infer_depth,
    "infer-pose": _cmd_infer_pose,
    "eval-ate": _cmd_eval_ate,
    "eval-curve": _cmd_eval_curve,
    "eval-depth": _cmd_eval_depth,
    "gradcheck": _cmd_gradcheck,
}


def _classify_failure(e: Exception):
    """Map an exception to (exit code, stderr label), or None to re-raise.

    Imported lazily because the specific exception types live in modules
    that pull in numpy. Order matters: the numerical and data-format types
    subclass ValueError/ArithmeticError and must be tested first.
    """
    from .diffcore.checkpoint import CheckpointError
    from .fileio import DataFormatError
    from .losses import NoValidPixels
    from .synthdata import RenderError
    if isinstance(e, (ArithmeticError, NoValidPixels, RenderError)):
        return EXIT_NUMERICAL, "numerical-error"
    if isinstance(e, (DataFormatError, CheckpointError, OSError)):
        return EXIT_IO, "io-error"
    if isinstance(e, (ValueError, TypeError, KeyError)):
        return EXIT_CONFIG, "config-error"
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _prescan_threads(argv)
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except Exception as e:
        outcome = _classify_failure(e)
        if outcome is None:
            raise
        code, label = outcome
        print(f"[{label}] {type(e).__name__}: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
