"""Finite-difference verification of every differentiable operation.

Each check builds a scalar objective from small random inputs, computes
gradients with the tape, and compares against central differences
(f(x+h) - f(x-h)) / 2h elementwise. Relative error uses
|a - n| / max(1, |a|, |n|) so near-zero gradients are compared absolutely.

Primitive ops must agree to 1e-4; composites that chain many ops (warping,
full losses, whole networks) to 1e-3. The suite doubles as the acceptance
gate and the `gradcheck` CLI subcommand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, batch_norm, concat, conv2d, conv2d_transpose, \
    softmax_pairs
from .geometry import CameraIntrinsics, batch_project, pose_vec_to_rt
from .losses import build_pyramid, mask_regularization, photometric_loss, \
    smoothness_loss, total_loss
from .models import DispNet, DispNetConfig, PoseExpNet, PoseExpNetConfig, \
    usable_scales
from .warp import bilinear_sample, inverse_warp

OP_TOL = 1e-4
COMPOSITE_TOL = 1e-3
STEP = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    threshold: float
    n_elements: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.threshold


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def _fd_check(f, leaves: dict, h: float = STEP) -> tuple[float, int]:
    """Max relative error between tape gradients and central differences over
    every element of every leaf; f() must rebuild the graph from the leaves."""
    out = f()
    out.backward()
    grads = {name: (t.grad.copy() if t.grad is not None
                    else np.zeros_like(t.data))
             for name, t in leaves.items()}
    worst = 0.0
    count = 0
    for name, leaf in leaves.items():
        flat = leaf.data.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            worst = max(worst, _rel_err(gflat[i], (fp - fm) / (2.0 * h)))
            count += 1
    return worst, count


def _leaf(rng, shape, scale=1.0, offset=0.0):
    return Tensor(offset + scale * rng.standard_normal(shape),
                  requires_grad=True)


def _projector(rng, builder):
    """Fixed random linear functional of builder()'s output, so repeated
    evaluations differ only through the leaves."""
    probe = builder()
    weights = Tensor(rng.standard_normal(probe.data.shape))
    return lambda: (builder() * weights).sum()


def _safe_coords(rng, n, h, w, oob=0):
    """Sampling coordinates with fractional parts in [0.2, 0.8] so no finite
    difference crosses a bilinear cell boundary; optionally some far
    out-of-bounds points (locally constant, gradient zero)."""
    xi = rng.integers(0, w - 1, n)
    yi = rng.integers(0, h - 1, n)
    x = xi + rng.uniform(0.2, 0.8, n)
    y = yi + rng.uniform(0.2, 0.8, n)
    if oob:
        x[:oob] = np.where(rng.random(oob) < 0.5, -2.0, w + 1.0) \
            + rng.uniform(-0.2, 0.2, oob)
    return np.stack([x, y], axis=-1).reshape(n, 1, 2)


def _check_conv(rng):
    x = _leaf(rng, (1, 2, 6, 7))
    w = _leaf(rng, (3, 2, 3, 3))
    b = _leaf(rng, (3,))
    stride = int(rng.integers(1, 3))
    f = _projector(rng, lambda: conv2d(x, w, b, stride=stride))
    return _fd_check(f, {"x": x, "w": w, "b": b})


def _check_conv_transpose(rng):
    x = _leaf(rng, (1, 3, 3, 4))
    w = _leaf(rng, (3, 2, 3, 3))
    b = _leaf(rng, (2,))
    f = _projector(rng, lambda: conv2d_transpose(x, w, b, stride=2))
    return _fd_check(f, {"x": x, "w": w, "b": b})


def _check_batch_norm(rng):
    x = _leaf(rng, (2, 3, 4, 4), scale=2.0)
    g = _leaf(rng, (3,), scale=0.3, offset=1.0)
    b = _leaf(rng, (3,), scale=0.3)
    rm, rv = np.zeros(3), np.ones(3)
    f = _projector(rng, lambda: batch_norm(x, g, b, rm, rv, training=True))
    return _fd_check(f, {"x": x, "g": g, "b": b})


def _check_relu(rng):
    raw = rng.standard_normal(40)
    # keep every element at least 0.1 from the kink so central differences
    # stay one-sided-consistent
    x = Tensor(raw + np.sign(raw) * 0.1, requires_grad=True)
    return _fd_check(_projector(rng, lambda: x.relu()), {"x": x})


def _check_sigmoid(rng):
    x = _leaf(rng, (40,), scale=3.0)
    return _fd_check(_projector(rng, lambda: x.sigmoid()), {"x": x})


def _check_softmax_pairs(rng):
    x = _leaf(rng, (1, 4, 3, 4), scale=2.0)
    return _fd_check(_projector(rng, lambda: softmax_pairs(x)), {"x": x})


def _check_bilinear(rng):
    src = _leaf(rng, (2, 6, 8))
    coords = Tensor(_safe_coords(rng, 24, 6, 8, oob=4), requires_grad=True)
    f = _projector(rng, lambda: bilinear_sample(src, coords)[0])
    return _fd_check(f, {"src": src, "coords": coords})


def _check_pose_vec(rng):
    vec = _leaf(rng, (6,), scale=0.2)
    pts = Tensor(rng.standard_normal((3, 5)))
    def build():
        R, t = pose_vec_to_rt(vec)
        return R @ pts + t.reshape(3, 1)
    return _fd_check(_projector(rng, build), {"vec": vec})


def _check_projection(rng):
    k = CameraIntrinsics(fx=10.0, fy=11.0, cx=3.0, cy=2.5)
    depth = _leaf(rng, (6, 8), scale=0.05, offset=1.0)
    vec = _leaf(rng, (6,), scale=0.004)
    def build():
        R, t = pose_vec_to_rt(vec)
        coords, valid, zs = batch_project(depth, R, t, k)
        if zs.data.min() <= 0.0:
            raise AssertionError("projection check expects in-front pixels")
        return concat([coords.reshape(-1), zs.reshape(-1)], axis=0)
    return _fd_check(_projector(rng, build), {"depth": depth, "vec": vec})


def _check_smoothness(rng):
    d = _leaf(rng, (6, 9), scale=0.1, offset=1.0)
    return _fd_check(lambda: smoothness_loss(d), {"d": d})


def _check_mask_reg(rng):
    logits = _leaf(rng, (2, 5, 6), scale=2.0)
    return _fd_check(lambda: mask_regularization(logits), {"logits": logits})


def _check_warp_photometric(rng):
    """inverse_warp + masked photometric loss wrt depth, pose, and logits."""
    k = CameraIntrinsics(fx=9.0, fy=9.0, cx=3.5, cy=2.5)
    target = Tensor(rng.random((1, 6, 8)))
    source = Tensor(rng.random((1, 6, 8)))
    depth = _leaf(rng, (6, 8), scale=0.03, offset=1.0)
    vec = _leaf(rng, (6,), scale=0.003)
    logits = _leaf(rng, (2, 6, 8), scale=1.0)
    from .losses import mask_from_logits
    def f():
        warped = inverse_warp(source, depth, vec, k)
        return photometric_loss(target, [warped], [mask_from_logits(logits)])
    return _fd_check(f, {"depth": depth, "vec": vec, "logits": logits})


def _e2e_networks(rng):
    """Full objective through both networks on a 16x52 toy config; gradients
    for 10 randomly chosen parameters."""
    h, w, b = 16, 52, 4
    disp_net = DispNet(DispNetConfig(base_channels=b, height=h, width=w),
                       seed=int(rng.integers(1 << 31)))
    pose_net = PoseExpNet(PoseExpNetConfig(base_channels=b, height=h, width=w),
                          seed=int(rng.integers(1 << 31)))
    k = CameraIntrinsics(fx=0.9 * w, fy=0.9 * w, cx=(w - 1) / 2, cy=(h - 1) / 2)
    n_scales = usable_scales(h, w)
    images = [rng.random((3, h, w)) for _ in range(3)]
    tgt_pyr = [Tensor(x) for x in build_pyramid(images[1], n_scales)]
    src_pyrs = [[Tensor(x) for x in build_pyramid(images[s], n_scales)]
                for s in (0, 2)]
    k_pyr = [k.scaled(2 ** l) for l in range(n_scales)]

    def objective():
        disparities = disp_net.forward(Tensor(images[1][None]), training=True)
        nine = np.concatenate([images[1], images[0], images[2]])[None]
        poses, logits = pose_net.forward(Tensor(nine), training=True)
        disps = [disparities[l][0, 0] for l in range(n_scales)]
        warps = []
        for l in range(n_scales):
            depth_l = disps[l] ** -1.0
            warps.append([inverse_warp(src_pyrs[s][l], depth_l,
                                       poses[0, 6 * s:6 * s + 6], k_pyr[l])
                          for s in range(2)])
        mask_logits = [[logits[l][0, 2 * s:2 * s + 2] for s in range(2)]
                       for l in range(n_scales)]
        return total_loss(tgt_pyr, warps, disps, mask_logits).total

    params = {f"disp.{n}": p for n, p in disp_net.params.items()}
    params.update({f"pose.{n}": p for n, p in pose_net.params.items()})
    names = sorted(params)
    picks = [(names[int(rng.integers(len(names)))],) for _ in range(10)]

    out = objective()
    out.backward()
    worst = 0.0
    for (name,) in picks:
        leaf = params[name]
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        i = int(rng.integers(flat.size))
        analytic = grad.reshape(-1)[i]
        orig = flat[i]
        flat[i] = orig + STEP
        fp = float(objective().data)
        flat[i] = orig - STEP
        fm = float(objective().data)
        flat[i] = orig
        worst = max(worst, _rel_err(analytic, (fp - fm) / (2.0 * STEP)))
    return worst, len(picks)


_OP_CHECKS = [
    ("conv2d", _check_conv, OP_TOL),
    ("conv2d_transpose", _check_conv_transpose, OP_TOL),
    ("batch_norm", _check_batch_norm, OP_TOL),
    ("relu", _check_relu, OP_TOL),
    ("sigmoid", _check_sigmoid, OP_TOL),
    ("softmax_pairs", _check_softmax_pairs, OP_TOL),
    ("bilinear_sample", _check_bilinear, OP_TOL),
    ("pose_vec_to_rt", _check_pose_vec, OP_TOL),
    ("smoothness_loss", _check_smoothness, OP_TOL),
    ("mask_regularization", _check_mask_reg, OP_TOL),
    ("projection", _check_projection, COMPOSITE_TOL),
    ("warp_photometric", _check_warp_photometric, COMPOSITE_TOL),
    ("networks_end_to_end", _e2e_networks, COMPOSITE_TOL),
]


def run_suite(seeds: int = 20, base_seed: int = 0) -> list[CheckResult]:
    """Run every check over the given number of seeds; one aggregated result
    per op, worst error across seeds."""
    results = []
    for op_index, (name, fn, tol) in enumerate(_OP_CHECKS):
        worst = 0.0
        total = 0
        for s in range(seeds):
            rng = np.random.default_rng([base_seed, op_index, s])
            err, n = fn(rng)
            worst = max(worst, err)
            total += n
        results.append(CheckResult(name=name, max_rel_err=worst,
                                   threshold=tol, n_elements=total))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        lines.append(f"{status:4s} {r.name:22s} max rel err {r.max_rel_err:.3e} "
                     f"(tol {r.threshold:.0e}, {r.n_elements} gradients)")
    return "\n".join(lines)
