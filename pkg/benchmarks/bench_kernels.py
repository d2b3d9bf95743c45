"""Numba kernels versus their numpy fallbacks.

Usage::

    python3 benchmarks/bench_kernels.py            # per-kernel timings
    python3 benchmarks/bench_kernels.py --e2e      # also a dynamics training step, both paths

Each kernel is checked for agreement before it is timed. The end-to-end row
runs in subprocesses because the path is chosen once at import time from
ELDEN_NO_NUMBA.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from elden import _kernels as K


def best_of(fn, repeat: int = 5, number: int = 1) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        best = min(best, (time.perf_counter() - t0) / number)
    return best


def case_gae(rng):
    t, e = 600, 20
    r, v = rng.random((t, e)), rng.random((t, e))
    d = (rng.random((t, e)) < 0.05).astype(np.float64)
    lv = rng.random(e)
    args = (r, v, d, lv, 0.99, 0.98)
    np.testing.assert_allclose(K.gae_jit(*args), K.gae_numpy(*args), rtol=1e-12, atol=1e-12)
    return "gae (600 x 20)", lambda: K.gae_numpy(*args), lambda: K.gae_jit(*args)


def case_rank(rng):
    n = 200_000
    s = np.sort(rng.random(n))[::-1].copy()
    y = (rng.random(n) < 0.1).astype(np.float64)
    a, b = K.rank_metrics_jit(s, y), K.rank_metrics_numpy(s, y)
    assert np.allclose(a, b, rtol=0, atol=1e-12), (a, b)
    return "rank metrics (200k)", lambda: K.rank_metrics_numpy(s, y), lambda: K.rank_metrics_jit(s, y)


def case_tree(rng):
    cap = 1 << 17
    tree = np.zeros(2 * cap)
    K.tree_update_many_numpy(tree, cap, np.arange(cap), rng.random(cap))
    idx = rng.integers(cap, size=32)
    vals = rng.random(32)
    targets = rng.random(32) * tree[1]
    t1, t2 = tree.copy(), tree.copy()
    K.tree_update_many_numpy(t1, cap, idx, vals)
    K.tree_update_many_jit(t2, cap, idx, vals)
    np.testing.assert_allclose(t1, t2, rtol=0, atol=1e-9)
    assert np.array_equal(K.tree_sample_numpy(t1, cap, targets), K.tree_sample_jit(t1, cap, targets))

    def np_path():
        K.tree_update_many_numpy(t1, cap, idx, vals)
        K.tree_sample_numpy(t1, cap, targets)

    def jit_path():
        K.tree_update_many_jit(t2, cap, idx, vals)
        K.tree_sample_jit(t2, cap, targets)

    return "sum-tree update+sample (32 of 131k)", np_path, jit_path


def case_adam(rng):
    n = 250_000
    p1 = rng.normal(size=n)
    g = rng.normal(size=n)
    m1, v1 = np.zeros(n), np.zeros(n)
    p2, m2, v2 = p1.copy(), m1.copy(), v1.copy()
    args = (3e-4, 0.9, 0.999, 1e-8, 0.1, 0.001)
    K.adam_update_numpy(p1, g, m1, v1, *args)
    K.adam_update_jit(p2, g, m2, v2, *args)
    np.testing.assert_allclose(p1, p2, rtol=1e-12, atol=1e-15)
    return ("adam update (250k params)", lambda: K.adam_update_numpy(p1, g, m1, v1, *args),
            lambda: K.adam_update_jit(p2, g, m2, v2, *args))


E2E = """
import time, numpy as np
from elden.envs import ThawingEnv, scripted_collect
from elden.dynamics import DynamicsConfig, DynamicsModel, PrioritizedBuffer, Trainer, train_step
env = ThawingEnv(grid_size=8)
d = scripted_collect(env, 5000, 0)
cfg = DynamicsConfig(lam=0.0)
buf = PrioritizedBuffer(d.schema, 10000, 0.5)
buf.add(d.states, d.actions, d.next_states)
tr = Trainer(DynamicsModel(d.schema, cfg, 0), cfg, np.random.default_rng(0))
for _ in range(20):
    train_step(tr, buf)
t0 = time.perf_counter()
for _ in range(100):
    train_step(tr, buf)
print((time.perf_counter() - t0) / 100)
"""


def e2e(no_numba: bool) -> float:
    env = dict(os.environ, ELDEN_NO_NUMBA="1" if no_numba else "0")
    out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--e2e", action="store_true", help="also time a full dynamics training step")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not importable; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for case in (case_gae, case_rank, case_tree, case_adam):
        name, f_np, f_jit = case(rng)
        f_jit()  # compile outside the timing
        t_np, t_jit = best_of(f_np, args.repeat), best_of(f_jit, args.repeat)
        print(f"{name:40s} {t_np * 1e3:10.3f} {t_jit * 1e3:10.3f} {t_np / t_jit:7.1f}x")
    if args.e2e:
        t_np, t_jit = e2e(True), e2e(False)
        print(f"{'dynamics train step (Thawing, B=32)':40s} {t_np * 1e3:10.3f} {t_jit * 1e3:10.3f} "
              f"{t_np / t_jit:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
