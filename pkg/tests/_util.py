"""Shared helpers for the test suite: small random networks and brute-force metric oracles."""

from __future__ import annotations

import numpy as np

from elden.tensorcore import Tensor, matmul, tanh


def rel_err(a, b) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


class SmallNet:
    """Random tanh MLP (B, D) -> (B, N) with 1 to 3 hidden layers."""

    def __init__(self, rng: np.random.Generator):
        self.d_in = int(rng.integers(2, 6))
        self.n_out = int(rng.integers(1, 4))
        widths = [self.d_in] + [int(rng.integers(2, 7)) for _ in range(int(rng.integers(1, 4)))] + [self.n_out]
        self.params = {}
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.params[f"w{k}"] = Tensor(rng.normal(0, 1 / np.sqrt(a), (a, b)), requires_grad=True)
            self.params[f"b{k}"] = Tensor(rng.normal(0, 0.1, (1, b)), requires_grad=True)
        self.depth = len(widths) - 1

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for k in range(self.depth):
            h = matmul(h, self.params[f"w{k}"]) + self.params[f"b{k}"]
            if k < self.depth - 1:
                h = tanh(h)
        return h


def brute_auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties counting half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    wins = 0.0
    for p in pos:
        wins += np.sum(p > neg) + 0.5 * np.sum(p == neg)
    return wins / (len(pos) * len(neg))


def brute_best_f1(scores, labels) -> float:
    """Max F1 over every threshold 'predict positive iff score >= t' for t in the score set."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if y.all() or not y.any():
        return float("nan")
    best = 0.0
    for t in np.unique(s):
        pred = s >= t
        tp = np.sum(pred & y)
        fp = np.sum(pred & ~y)
        fn = np.sum(~pred & y)
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        best = max(best, f1)
    return best
