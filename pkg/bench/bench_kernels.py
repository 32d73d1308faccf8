"""Benchmark the compiled convolution kernels against the numpy fallback.

Runs the three kernel entry points (forward, input gradient, weight
gradient) on the layer shapes the networks actually use at the default
training geometry, checks the backends agree numerically, and reports
per-call timings plus speedups.

Usage: python3 bench/bench_kernels.py [--repeats N] [--batch N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ssvo.diffcore.kernels import available_backends, get_backend
from ssvo.diffcore.nnops import _same_pads

PARITY_TOL = 1e-10


def layer_cases(batch: int, height: int, width: int, base: int):
    """(name, x shape, w shape, stride) for representative network layers."""
    b = base
    h2, w2 = height // 2, width // 2
    h4, w4 = height // 4, width // 4
    h8, w8 = height // 8, width // 8
    return [
        # disparity encoder: large kernels, full-resolution input
        ("enc1 7x7 s2", (batch, 3, height, width), (b, 3, 7, 7), 2),
        ("enc2 7x7 s2", (batch, b, h2, w2), (2 * b, b, 7, 7), 2),
        ("enc3 5x5 s2", (batch, 2 * b, h4, w4), (4 * b, 2 * b, 5, 5), 2),
        ("enc5 3x3 s2", (batch, 8 * b, h8, w8), (8 * b, 8 * b, 3, 3), 2),
        # decoder refinement after skip concatenation, stride 1
        ("dec2 3x3 s1", (batch, 2 * b + b, h2, w2), (b, 3 * b, 3, 3), 1),
        # full-scale prediction head
        ("pred 3x3 s1", (batch, b, height, width), (1, b, 3, 3), 1),
        # motion/mask encoder sees the stacked 3-frame input
        ("pose1 7x7 s2", (batch, 9, height, width), (2 * b, 9, 7, 7), 2),
    ]


def _best_of(fn, repeats: int) -> float:
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(name, x_shape, w_shape, stride, backends, repeats, rng):
    n, c, h, w = x_shape
    f, _, kh, kw = w_shape
    x = rng.standard_normal(x_shape)
    wgt = rng.standard_normal(w_shape)
    ho, wo, pt, pl = _same_pads(h, w, kh, kw, stride)
    gy = rng.standard_normal((n, f, ho, wo))

    calls = {
        "forward": lambda k: k.conv2d_forward(x, wgt, stride, pt, pl, ho, wo),
        "input_grad": lambda k: k.conv2d_input_grad(gy, wgt, stride, pt, pl,
                                                    h, w),
        "weight_grad": lambda k: k.conv2d_weight_grad(gy, x, stride, pt, pl,
                                                      kh, kw),
    }

    rows = []
    for call_name, call in calls.items():
        outputs = {b: call(get_backend(b)) for b in backends}
        if len(backends) == 2:
            a, b = (outputs[name] for name in backends)
            err = np.abs(a - b).max() / max(1.0, np.abs(a).max())
            if err > PARITY_TOL:
                raise AssertionError(
                    f"{name} {call_name}: backends disagree (rel err {err:.3e})")
        times = {b: _best_of(lambda b=b: call(get_backend(b)), repeats)
                 for b in backends}
        rows.append((f"{name} {call_name}", times))
    return rows


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timing repetitions per call (best is kept)")
    parser.add_argument("--batch", type=int, default=8)
    parser.add_argument("--height", type=int, default=32)
    parser.add_argument("--width", type=int, default=104)
    parser.add_argument("--base-channels", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    backends = available_backends()
    print(f"backends: {', '.join(backends)}")
    if len(backends) < 2:
        print("compiled extension not built; timing the numpy backend only")

    rng = np.random.default_rng([args.seed, 0xBE7C])
    header = f"{'case':<28}" + "".join(f"{b + ' (ms)':>16}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))

    totals = dict.fromkeys(backends, 0.0)
    for case in layer_cases(args.batch, args.height, args.width,
                            args.base_channels):
        for row_name, times in bench_case(*case, backends, args.repeats, rng):
            line = f"{row_name:<28}"
            for b in backends:
                line += f"{times[b] * 1e3:>16.3f}"
                totals[b] += times[b]
            if len(backends) == 2:
                line += f"{times[backends[1]] / times[backends[0]]:>9.1f}x"
            print(line)

    line = f"{'total':<28}"
    for b in backends:
        line += f"{totals[b] * 1e3:>16.3f}"
    if len(backends) == 2:
        line += f"{totals[backends[1]] / totals[backends[0]]:>9.1f}x"
    print(line)
    print("parity: all backend pairs agree to" if len(backends) == 2 else
          "parity: single backend, nothing to compare against",
          f"{PARITY_TOL:g} relative" if len(backends) == 2 else "")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
