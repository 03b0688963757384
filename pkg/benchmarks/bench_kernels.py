"""Side-by-side timings for the two conv2d builds.

Runs every kernel (forward, input gradient, weight gradient) on shapes
taken from the image model's stages, checks that the numba loops and
the BLAS lowering agree to 1e-10, then reports per-call wall time for
both.  The package default is the numpy build; set ``IBGC_BACKEND=numba``
to flip the dispatch if the compiled loops win on your machine.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--batch N]
"""

import argparse
import time

import numpy as np

from ibgc import kernels as K

# (label, cin, hw, cout, kernel, stride, padding) per image-model stage
SHAPES = [
    ("entry 7x7 /1", 2, 8, 16, 7, 1, 3),
    ("mid 3x3 /1", 8, 8, 64, 3, 1, 1),
    ("down 3x3 /2", 16, 8, 64, 3, 2, 1),
    ("late 3x3 /1", 32, 4, 128, 3, 1, 1),
]


def timed(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def run(batch, repeat):
    if not K.HAVE_NUMBA:
        print("numba is not importable; timing the numpy build only")
    rng = np.random.default_rng(0)
    print("%-14s %-13s %12s %12s %8s" % ("stage", "kernel", "numpy", "numba", "ratio"))
    for label, cin, hw, cout, k, stride, pad in SHAPES:
        x = rng.standard_normal((batch, cin, hw, hw))
        w = rng.standard_normal((cout, cin, k, k)) * 0.1
        ho, wo = K.out_hw(hw, hw, k, stride, pad)
        dy = rng.standard_normal((batch, cout, ho, wo))
        ops = [
            ("forward",
             lambda: K.conv2d_forward_numpy(x, w, stride, pad),
             lambda: K.conv2d_forward_numba(x, w, stride, pad)),
            ("grad_input",
             lambda: K.conv2d_grad_input_numpy(dy, w, x.shape, stride, pad),
             lambda: K.conv2d_grad_input_numba(dy, w, x.shape, stride, pad)),
            ("grad_weight",
             lambda: K.conv2d_grad_weight_numpy(x, dy, k, stride, pad),
             lambda: K.conv2d_grad_weight_numba(x, dy, k, stride, pad)),
        ]
        for name, np_fn, nb_fn in ops:
            t_np, ref = timed(np_fn, repeat)
            if not K.HAVE_NUMBA:
                print("%-14s %-13s %10.3fms %12s %8s" % (label, name, 1e3 * t_np, "-", "-"))
                continue
            nb_fn()  # compile outside the timed region
            t_nb, got = timed(nb_fn, repeat)
            gap = float(np.max(np.abs(ref - got)))
            if gap > 1e-10:
                raise AssertionError("builds disagree on %s %s: %.3e" % (label, name, gap))
            print("%-14s %-13s %10.3fms %10.3fms %7.2fx" % (
                label, name, 1e3 * t_np, 1e3 * t_nb, t_nb / t_np))
    if K.HAVE_NUMBA:
        print("\nall kernels agree to 1e-10; ratio > 1 means numpy is faster")
    print("active dispatch for this process: %s" % K.BACKEND)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--batch", type=int, default=125)
    args = ap.parse_args()
    run(args.batch, args.repeat)
