#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times each hot kernel on both backends across batch sizes, checks that
the two paths agree numerically, and measures one full training step.
The active backend for package-level code is chosen by SALB_BACKEND at
import time; this script talks to both kernel tables directly.

    python3 benchmarks/bench_kernels.py [--quick]
"""

import argparse
import time

import numpy as np

from softalign.backend import NUMBA_AVAILABLE, kernel_table
from softalign.synthgen import SynthSpec, generate
from softalign.trainer import TrainConfig, init_state, loss_and_grads, optimizer_step


def time_call(fn, *args, repeats=200):
    fn(*args)  # warm-up (includes JIT compilation on the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def bench_kernels(sizes, repeats):
    nb = kernel_table("numba")
    np_ = kernel_table("numpy")
    rng = np.random.default_rng(0)
    print(f"{'kernel':26s} {'size':>10s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}")
    for n in sizes:
        z = np.ascontiguousarray(rng.standard_normal((n, n)) * 10)
        p = np_["softmax_rows"](z)
        g = np.ascontiguousarray(rng.standard_normal((n, n)))
        lp = np.log(p)
        cases = [
            ("softmax_rows", (z,)),
            ("logsoftmax_rows", (z,)),
            ("masked_softmax_rows", (z,)),
            ("softmax_vjp_rows", (p, g)),
            ("kl_term_rows", (p, lp, lp)),
        ]
        for name, args in cases:
            got_nb, got_np = nb[name](*args), np_[name](*args)
            np.testing.assert_allclose(got_nb, got_np, rtol=1e-12, atol=1e-14)
            t_nb = time_call(nb[name], *args, repeats=repeats)
            t_np = time_call(np_[name], *args, repeats=repeats)
            print(f"{name:26s} {n:>6d}x{n:<3d} {t_nb*1e6:>8.1f}us "
                  f"{t_np*1e6:>8.1f}us {t_np/t_nb:>7.2f}x")

    for k in (10_000, 200_000):
        p0 = rng.standard_normal(k)
        grad = rng.standard_normal(k)

        def run(table):
            pp, m, v = p0.copy(), np.zeros(k), np.zeros(k)
            table["adamw_update"](pp, grad, m, v, 1e-3, 0.2, 0.9, 0.999,
                                  1e-8, 0.1, 0.001)
            return pp

        np.testing.assert_allclose(run(nb), run(np_), rtol=1e-13)
        t_nb = time_call(lambda: run(nb), repeats=repeats)
        t_np = time_call(lambda: run(np_), repeats=repeats)
        print(f"{'adamw_update':26s} {k:>10d} {t_nb*1e6:>8.1f}us "
              f"{t_np*1e6:>8.1f}us {t_np/t_nb:>7.2f}x")


def bench_train_step(repeats):
    ds = generate(SynthSpec(n_samples=256, d_roi=256, seed=0))
    cfg = TrainConfig(batch_size=64, seed=0)
    state = init_state(ds.spec, cfg)
    idx = np.arange(64)

    def step():
        _, _, grads = loss_and_grads(state, ds, idx)
        optimizer_step(state, grads, lr=1e-3, cfg=cfg)

    t = time_call(step, repeats=repeats)
    print(f"\nfull train step (N=64, d_roi=256, {['numpy','numba'][NUMBA_AVAILABLE]} "
          f"backend per SALB_BACKEND): {t*1e3:.2f} ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true",
                        help="fewer repeats and sizes")
    args = parser.parse_args()
    if not NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")
    sizes = (64, 512) if args.quick else (64, 256, 1024)
    repeats = 50 if args.quick else 200
    bench_kernels(sizes, repeats)
    bench_train_step(20 if args.quick else 100)


if __name__ == "__main__":
    main()
