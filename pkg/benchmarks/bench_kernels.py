#!/usr/bin/env python3
"""Benchmark the compiled kernel backend against the numpy fallback.

Runs each kernel on training-representative sizes plus one full training
step, and prints a timing table. Both backends implement identical
summation-order semantics, so this is purely a speed comparison.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from bimatch import _kernels_py

try:
    from bimatch import _kernels
except ImportError:
    _kernels = None


def _time(fn, repeat: int) -> float:
    fn()  # warm up
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def kernel_cases(rng):
    hw, c, cf, l, k = 576, 16, 8, 8, 6
    feat = np.ascontiguousarray(rng.normal(size=(hw, cf)))
    proj = np.ascontiguousarray(rng.normal(size=(cf, c)))
    attn = np.ascontiguousarray(rng.normal(size=(l, hw)))
    values = np.ascontiguousarray(rng.normal(size=(hw, c)))
    masks = np.ascontiguousarray(rng.random((2 * l, hw)))
    gmasks = np.ascontiguousarray((rng.random((k, hw)) < 0.3).astype(float))
    return [
        ("matmul (HWxCf)@(CfxC)", lambda m: m.matmul(feat, proj)),
        ("matmul (LxHW)@(HWxC)", lambda m: m.matmul(attn, values)),
        ("softmax_rows (LxHW)", lambda m: m.softmax_rows(attn)),
        ("row_sums (2LxHW)", lambda m: m.row_sums(masks)),
        ("mask_pair_costs (2LxK)", lambda m: m.mask_pair_costs(
            masks, gmasks, 1.0, 1.0)),
    ]


_TRAIN_SNIPPET = """
import time
from bimatch.config import RunConfig
from bimatch.model import train
from bimatch.synth import generate_benchmark
cfg = RunConfig(steps=20, mode="umm")
scenes = generate_benchmark(cfg.synth_config(), 4)
train(cfg, scenes, eval_scenes=scenes[:1])  # warm up
start = time.perf_counter()
train(cfg, scenes, eval_scenes=scenes[:1])
print(time.perf_counter() - start)
"""


def train_step_time(backend: str) -> float | None:
    """Time 20 training steps in a subprocess pinned to one backend."""
    import os
    import subprocess
    import sys

    env = dict(os.environ)
    env["BIMATCH_KERNELS"] = backend
    proc = subprocess.run([sys.executable, "-c", _TRAIN_SNIPPET],
                          capture_output=True, text=True, env=env)
    if proc.returncode != 0:
        return None
    return float(proc.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.Generator(np.random.PCG64(0))
    rows = []
    for name, fn in kernel_cases(rng):
        t_py = _time(lambda: fn(_kernels_py), args.repeat)
        t_c = _time(lambda: fn(_kernels), args.repeat) if _kernels else None
        rows.append((name, t_py, t_c))

    t_py_step = train_step_time("py")
    t_c_step = train_step_time("c") if _kernels else None
    rows.append(("train 20 steps, end to end", t_py_step, t_c_step))

    width = max(len(r[0]) for r in rows)
    print(f"{'case'.ljust(width)}  {'fallback':>12}  {'compiled':>12}  {'speedup':>8}")
    for name, t_py, t_c in rows:
        py_cell = f"{t_py * 1e3:10.3f}ms" if t_py is not None else f"{'-':>12}"
        if t_c is None:
            print(f"{name.ljust(width)}  {py_cell}  {'-':>12}  {'-':>8}")
        else:
            print(f"{name.ljust(width)}  {py_cell}  "
                  f"{t_c * 1e3:10.3f}ms  {t_py / t_c:7.1f}x")
    if _kernels is None:
        print("compiled backend not built; showing fallback only")


if __name__ == "__main__":
    main()
