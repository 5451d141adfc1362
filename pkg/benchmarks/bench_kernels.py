"""Compiled kernels vs the numpy fallback.

Times each hot kernel on shapes taken from the desk-scale detector, checks
that both backends agree, then times a full training step under each
backend in a subprocess (backend choice is fixed at import).

    python3 benchmarks/bench_kernels.py [--repeats 20] [--no-step]
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from rundet import _fallback
from rundet.kernels import compiled_available

STEP_SNIPPET = """
import time, numpy as np
from rundet import kernels
from rundet.config import ExperimentConfig
from rundet.detector import Detector
from rundet.loss import build_targets, multibox_loss
from rundet.shapesdata import render_sample
from rundet.tensor import backward, zero_grad
rng = np.random.default_rng(0)
samples = [render_sample(rng) for _ in range(16)]
images = np.stack([s[0].transpose(2, 0, 1) for s in samples]) / 255.0
model = Detector(ExperimentConfig().replace(**{"resblock.mode": "3way"}))
targets = build_targets(model.defaults, [s[1] for s in samples], [s[2] for s in samples])
times = []
for _ in range(%d):
    t0 = time.perf_counter()
    backward(multibox_loss(model(images), targets).total)
    zero_grad(model.params())
    times.append(time.perf_counter() - t0)
print(kernels.BACKEND, 1e3 * float(np.median(times[1:])))
"""


def kernel_cases(rng):
    x = rng.standard_normal((16, 32, 32, 32))
    cols = rng.standard_normal((32 * 9, 16 * 32 * 32))
    pool_out, arg = _fallback.maxpool_forward(x, 2, 2)
    corner = rng.random((400, 2)) * 0.7
    boxes = np.hstack([corner, corner + rng.uniform(0.02, 0.3, (400, 2))])
    scores = rng.random(400)
    return {
        "im2col 16x32x32x32 k3": ("im2col", (x, 3, 1, 1)),
        "col2im 16x32x32x32 k3": ("col2im", (cols, 16, 32, 32, 32, 3, 1, 1)),
        "maxpool fwd 2x2": ("maxpool_forward", (x, 2, 2)),
        "maxpool bwd 2x2": ("maxpool_backward", (rng.standard_normal(pool_out.shape), arg, 32, 32)),
        "iou 400x2040": ("iou_matrix", (boxes, np.ascontiguousarray(np.tile(boxes, (6, 1))[:2040]))),
        "nms 400 boxes": ("nms", (boxes, scores, 0.45, 200)),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(u, v) for u, v in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def bench_kernels(repeats):
    from rundet import _kernels

    rng = np.random.default_rng(0)
    print(f"{'kernel':<24} {'cython ms':>10} {'numpy ms':>10} {'speedup':>8}  agree")
    for label, (name, args) in kernel_cases(rng).items():
        fast, slow = getattr(_kernels, name), getattr(_fallback, name)
        agree = _same(fast(*args), slow(*args))
        t_fast = min(timeit.repeat(lambda: fast(*args), number=1, repeat=repeats)) * 1e3
        t_slow = min(timeit.repeat(lambda: slow(*args), number=1, repeat=repeats)) * 1e3
        print(f"{label:<24} {t_fast:>10.3f} {t_slow:>10.3f} {t_slow / t_fast:>7.2f}x  {agree}")


def bench_step(steps):
    print(f"\ntraining step, batch 16, default 3way config (median of {steps - 1})")
    for pure in ("0", "1"):
        env = dict(os.environ, RUNDET_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET % steps], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"  {out[0]:<8} {float(out[1]):8.1f} ms")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--no-step", action="store_true")
    args = p.parse_args(argv)
    if not compiled_available():
        sys.exit("compiled extension not built: python3 setup.py build_ext --inplace")
    bench_kernels(args.repeats)
    if not args.no_step:
        bench_step(args.steps)


if __name__ == "__main__":
    main()
