from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest

from elden import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not importable")


def test_gae_paths_agree():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    d = (rng.random((50, 3)) < 0.1).astype(float)
    lv = rng.normal(size=3)
    a = K.gae_jit(r, v, d, lv, 0.99, 0.95)
    b = K.gae_numpy(r, v, d, lv, 0.99, 0.95)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)


def test_rank_metric_paths_agree_with_ties():
    rng = np.random.default_rng(1)
    s = np.sort(rng.integers(0, 5, 300).astype(float))[::-1].copy()
    y = (rng.random(300) < 0.3).astype(float)
    assert np.allclose(K.rank_metrics_jit(s, y), K.rank_metrics_numpy(s, y), rtol=0, atol=1e-12)


def test_sum_tree_paths_agree():
    rng = np.random.default_rng(2)
    cap = 64
    t1, t2 = np.zeros(2 * cap), np.zeros(2 * cap)
    idx = rng.integers(0, cap, 40)
    vals = rng.random(40)
    K.tree_update_many_numpy(t1, cap, idx, vals)
    K.tree_update_many_jit(t2, cap, idx, vals)
    np.testing.assert_allclose(t1, t2, atol=1e-12)
    targets = rng.random(100) * t1[1]
    assert np.array_equal(K.tree_sample_numpy(t1, cap, targets), K.tree_sample_jit(t2, cap, targets))


def test_adam_paths_agree():
    rng = np.random.default_rng(3)
    p1, g = rng.normal(size=100), rng.normal(size=100)
    m1, v1 = rng.random(100), rng.random(100)
    p2, m2, v2 = p1.copy(), m1.copy(), v1.copy()
    K.adam_update_numpy(p1, g, m1, v1, 1e-3, 0.9, 0.999, 1e-8, 0.5, 0.2)
    K.adam_update_jit(p2, g, m2, v2, 1e-3, 0.9, 0.999, 1e-8, 0.5, 0.2)
    for a, b in ((p1, p2), (m1, m2), (v1, v2)):
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


def test_env_flag_selects_numpy_path():
    code = "from elden import _kernels as K; print(K.USE_NUMBA)"
    for flag, expect in (("1", "False"), ("0", "True")):
        out = subprocess.run([sys.executable, "-c", code], env=dict(os.environ, ELDEN_NO_NUMBA=flag),
                             capture_output=True, text=True, check=True)
        assert out.stdout.strip() == expect
