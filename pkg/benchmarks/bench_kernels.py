#!/usr/bin/env python
"""
Time the numba kernels against their numpy twins, plus one training step.

Usage:
    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --repeats 50 --output bench.json
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from fd2cl import kernels
from fd2cl._accel import NUMBA_AVAILABLE


def cases(rng):
    x = rng.normal(size=(64, 256))
    t = np.tanh(x)
    gy = rng.normal(size=x.shape)
    imgs = rng.uniform(size=(96, 32, 32))
    bands = kernels._haar_forward_numpy(imgs)
    img = rng.uniform(size=(3, 32, 32))
    scores = np.round(rng.normal(size=2000), 2)
    return {
        "gelu_forward": (x,),
        "gelu_backward": (x, t, gy),
        "haar_forward": (imgs,),
        "haar_inverse": bands,
        "median_filter": (img, 5),
        "average_ranks": (scores,),
    }


def best_of(fn, args, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def train_step_time(use_numba, repeats):
    """Median step time in a fresh interpreter, since the switch is read at import."""
    code = (
        "import time, numpy as np\n"
        "from fd2cl.model import Model, ModelConfig\n"
        "from fd2cl.numcore import Tape\n"
        "from fd2cl.losses import bce_loss\n"
        "m = Model(ModelConfig(), 0)\n"
        "x = np.random.default_rng(0).uniform(size=(32, 3, 32, 32)); y = np.arange(32) % 2\n"
        "ts = []\n"
        f"for _ in range({repeats} + 1):\n"
        "    t0 = time.perf_counter()\n"
        "    with Tape() as tape:\n"
        "        logits, _ = m.forward(x, train=False)\n"
        "        loss = bce_loss(logits, y)\n"
        "    tape.gradient(loss, m.trainable())\n"
        "    ts.append(time.perf_counter() - t0)\n"
        "print(sorted(ts[1:])[len(ts[1:]) // 2])\n"
    )
    env = dict(os.environ, FD2CL_NUMBA="1" if use_numba else "0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--step-repeats", type=int, default=10)
    parser.add_argument("--output", help="write results as JSON")
    args = parser.parse_args()

    if not NUMBA_AVAILABLE:
        print("numba not importable; only the numpy path can be timed")

    rng = np.random.default_rng(0)
    results = {}
    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  max|diff|")
    for name, call_args in cases(rng).items():
        np_fn = kernels.NUMPY_KERNELS[name]
        t_np = best_of(np_fn, call_args, args.repeats)
        row = {"numpy_ms": t_np * 1e3}
        if NUMBA_AVAILABLE:
            nb_fn = kernels.NUMBA_KERNELS[name]
            nb_fn(*call_args)  # compile outside the timed region
            t_nb = best_of(nb_fn, call_args, args.repeats)
            a, b = np_fn(*call_args), nb_fn(*call_args)
            a = a if isinstance(a, tuple) else (a,)
            b = b if isinstance(b, tuple) else (b,)
            diff = max(float(np.max(np.abs(u - v))) for u, v in zip(a, b))
            row.update(numba_ms=t_nb * 1e3, speedup=t_np / t_nb, max_abs_diff=diff)
            print(f"{name:<16} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f}  {diff:.1e}")
        else:
            print(f"{name:<16} {t_np * 1e3:10.3f} {'-':>10} {'-':>8}")
        results[name] = row

    step = {"numpy_ms": train_step_time(False, args.step_repeats) * 1e3}
    if NUMBA_AVAILABLE:
        step["numba_ms"] = train_step_time(True, args.step_repeats) * 1e3
    results["train_step_b32"] = step
    print("train step (batch 32): " + ", ".join(f"{k} {v:.1f}" for k, v in step.items()))

    if args.output:
        with open(args.output, "w") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
