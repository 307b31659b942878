#!/usr/bin/env python3
"""Compiled vs pure-numpy kernel backends: speed and bit-identity.

Times the three hot kernels on training-sized inputs, checks that both
backends produce byte-for-byte identical outputs, then times a short
training run under each backend in separate processes (train.py binds its
backend at import, so the split has to happen before import).

Usage: python3 benchmarks/bench_kernels.py
"""

import math
import os
import subprocess
import sys
import tempfile
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from moelab.backend import load_backend

REPEATS = 5
INNER = 10
TRAIN_STEPS = 30


def best_of(fn, repeats=REPEATS, inner=INNER):
    """Best mean seconds per call over several batches of calls."""
    best = math.inf
    for _ in range(repeats):
        start = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - start) / inner)
    return best


def bench_adam(kern, size, rng):
    p = rng.standard_normal(size)
    g = rng.standard_normal(size)
    m = np.zeros(size)
    v = np.zeros(size)
    return best_of(lambda: kern.adam_update(p, g, m, v, 1e-3, 0.9, 0.95,
                                            1e-8, 0.1, 0.05))


def check_adam(kern, size, rng):
    p = rng.standard_normal(size)
    g = rng.standard_normal(size)
    m = rng.standard_normal(size) * 0.1
    v = rng.standard_normal(size) ** 2
    state = p.copy(), m.copy(), v.copy()
    kern.adam_update(p, g, m, v, 1e-3, 0.9, 0.95, 1e-8, 0.1, 0.05)
    return state, (p, m, v)


def bench_scatter(kern, n_slots, n_rows, width, rng):
    out = np.zeros((n_rows, width))
    ids = rng.integers(0, n_rows, size=n_slots)
    rows = rng.standard_normal((n_slots, width))
    def step():
        out.fill(0.0)
        kern.scatter_add_rows(out, ids, rows)
    return best_of(step), out.copy()


def bench_topk(kern, n_rows, width, k, rng):
    x = rng.standard_normal((n_rows, width))
    return best_of(lambda: kern.topk_rows(x, k)), kern.topk_rows(x, k)


def time_train_subprocess(pure_python):
    """Run a short training job in a child process pinned to one backend."""
    env = dict(os.environ)
    env.pop("MOELAB_PURE_PYTHON", None)
    if pure_python:
        env["MOELAB_PURE_PYTHON"] = "1"
    proc = subprocess.run(
        [sys.executable, os.path.abspath(__file__), "--train-worker"],
        env=env, capture_output=True, text=True, check=True,
    )
    backend, seconds = proc.stdout.split()
    return backend, float(seconds)


def train_worker():
    from moelab.backend import BACKEND
    from moelab.model import ModelConfig
    from moelab.train import TrainConfig, make_synthetic_corpus, train

    model_cfg = ModelConfig(
        vocab_size=256, n_layers=2, hidden_size=64, dense_ffn_hidden=256,
        moe_ffn_hidden=64, n_experts=8, k_active=2, n_shared=1, n_heads=2,
        max_seq_len=128,
    )
    train_cfg = TrainConfig(total_steps=TRAIN_STEPS, batch_size=8, seq_len=64,
                            checkpoint_count=1)
    corpus = make_synthetic_corpus(256, 40000, seed=0)
    with tempfile.TemporaryDirectory() as tmp:
        start = time.perf_counter()
        train(model_cfg, train_cfg, corpus, os.path.join(tmp, "run"))
        elapsed = time.perf_counter() - start
    print(BACKEND, elapsed)


def fmt_row(name, shape, t_py, t_c, identical):
    speedup = t_py / t_c if t_c else float("inf")
    mark = "bit-identical" if identical else "MISMATCH"
    print(f"{name:<18} {shape:<22} {t_py * 1e3:>9.3f} {t_c * 1e3:>9.3f} "
          f"{speedup:>7.2f}x  {mark}")


def main():
    py = load_backend("python")
    try:
        comp = load_backend("compiled")
    except ImportError:
        print("compiled extension not built; run pip install -e . first")
        return 1

    print(f"{'kernel':<18} {'shape':<22} {'python ms':>9} {'compiled ms':>11} "
          f"{'speedup':>8}")
    rng = np.random.default_rng(0)

    for size in (65_536, 1_048_576):
        t_py = bench_adam(py, size, np.random.default_rng(1))
        t_c = bench_adam(comp, size, np.random.default_rng(1))
        before, after_py = check_adam(py, size, np.random.default_rng(2))
        _, after_c = check_adam(comp, size, np.random.default_rng(2))
        same = all(np.array_equal(a, b) for a, b in zip(after_py, after_c))
        fmt_row("adam_update", f"({size},)", t_py, t_c, same)

    for n_slots, n_rows, width in ((4096, 512, 64), (16384, 2048, 256)):
        t_py, out_py = bench_scatter(py, n_slots, n_rows, width,
                                     np.random.default_rng(3))
        t_c, out_c = bench_scatter(comp, n_slots, n_rows, width,
                                   np.random.default_rng(3))
        fmt_row("scatter_add_rows", f"{n_slots}->({n_rows},{width})",
                t_py, t_c, np.array_equal(out_py, out_c))

    for n_rows, width, k in ((2048, 8, 2), (4096, 64, 8)):
        t_py, (i_py, v_py) = bench_topk(py, n_rows, width, k,
                                        np.random.default_rng(4))
        t_c, (i_c, v_c) = bench_topk(comp, n_rows, width, k,
                                     np.random.default_rng(4))
        same = np.array_equal(i_py, i_c) and np.array_equal(v_py, v_c)
        fmt_row("topk_rows", f"({n_rows},{width}) k={k}", t_py, t_c, same)

    print()
    backend_a, secs_a = time_train_subprocess(pure_python=True)
    backend_b, secs_b = time_train_subprocess(pure_python=False)
    assert backend_a == "python" and backend_b == "compiled"
    print(f"train {TRAIN_STEPS} steps   python {secs_a:.2f}s   "
          f"compiled {secs_b:.2f}s   {secs_a / secs_b:.2f}x")
    return 0


if __name__ == "__main__":
    if "--train-worker" in sys.argv:
        train_worker()
    else:
        sys.exit(main())
