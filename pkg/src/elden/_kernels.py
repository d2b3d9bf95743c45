"""Loop-heavy numeric kernels.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature. The numba path is used when numba imports and the
environment variable ``ELDEN_NO_NUMBA`` is unset (or ``0``). Both paths are
kept importable so tests and ``benchmarks/bench_kernels.py`` can compare them.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("ELDEN_NO_NUMBA", "0") in ("", "0")


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# -- generalized advantage estimation -----------------------------------------


def gae_loop(rewards, values, dones, last_values, gamma, lam):
    T, E = rewards.shape
    adv = np.zeros((T, E))
    for e in range(E):
        running = 0.0
        for t in range(T - 1, -1, -1):
            nonterminal = 1.0 - dones[t, e]
            next_v = last_values[e] if t == T - 1 else values[t + 1, e]
            delta = rewards[t, e] + gamma * next_v * nonterminal - values[t, e]
            running = delta + gamma * lam * nonterminal * running
            adv[t, e] = running
    return adv


def gae_numpy(rewards, values, dones, last_values, gamma, lam):
    T = rewards.shape[0]
    nonterminal = 1.0 - dones
    next_values = np.concatenate([values[1:], last_values[None, :]], axis=0)
    deltas = rewards + gamma * next_values * nonterminal - values
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1])
    for t in range(T - 1, -1, -1):
        running = deltas[t] + gamma * lam * nonterminal[t] * running
        adv[t] = running
    return adv


# -- ranking metrics over sorted scores ----------------------------------------


def rank_metrics_loop(sorted_scores, sorted_labels):
    """(roc_auc, best_f1) for scores sorted in descending order.

    Tied scores are swept as one group, so every threshold between distinct
    scores (plus both infinities) is visited exactly once.
    """
    n = sorted_scores.shape[0]
    P = 0.0
    for i in range(n):
        P += sorted_labels[i]
    Nn = n - P
    tp = 0.0
    fp = 0.0
    auc = 0.0
    best = 0.0
    i = 0
    while i < n:
        j = i
        gp = 0.0
        gn = 0.0
        while j < n and sorted_scores[j] == sorted_scores[i]:
            if sorted_labels[j] > 0.5:
                gp += 1.0
            else:
                gn += 1.0
            j += 1
        # negatives in this group rank below every earlier positive, tie with gp
        auc += gn * (tp + 0.5 * gp)
        tp += gp
        fp += gn
        denom = 2.0 * tp + fp + (P - tp)
        if denom > 0:
            f1 = 2.0 * tp / denom
            if f1 > best:
                best = f1
        i = j
    return auc / (P * Nn), best


def rank_metrics_numpy(sorted_scores, sorted_labels):
    P = float(sorted_labels.sum())
    Nn = sorted_labels.shape[0] - P
    # group boundaries: last index of each run of equal scores
    change = np.nonzero(np.diff(sorted_scores))[0]
    ends = np.concatenate([change, [sorted_scores.shape[0] - 1]])
    cum_pos = np.cumsum(sorted_labels)[ends]
    cum_neg = (ends + 1) - cum_pos
    gp = np.diff(np.concatenate([[0.0], cum_pos]))
    gn = np.diff(np.concatenate([[0.0], cum_neg]))
    tp_before = cum_pos - gp
    auc = float(np.sum(gn * (tp_before + 0.5 * gp))) / (P * Nn)
    f1 = 2.0 * cum_pos / (2.0 * cum_pos + cum_neg + (P - cum_pos))
    return auc, float(max(f1.max(), 0.0))


# -- sum tree for proportional sampling -----------------------------------------


def tree_update_loop(tree, capacity, idx, value):
    pos = idx + capacity
    delta = value - tree[pos]
    while pos >= 1:
        tree[pos] += delta
        pos //= 2


def tree_update_many_loop(tree, capacity, idxs, values):
    for k in range(idxs.shape[0]):
        pos = idxs[k] + capacity
        tree[pos] = values[k]
        pos //= 2
        while pos >= 1:
            tree[pos] = tree[2 * pos] + tree[2 * pos + 1]
            pos //= 2


def tree_sample_loop(tree, capacity, targets):
    out = np.empty(targets.shape[0], dtype=np.int64)
    for k in range(targets.shape[0]):
        u = targets[k]
        pos = 1
        while pos < capacity:
            left = tree[2 * pos]
            if u < left:
                pos = 2 * pos
            else:
                u -= left
                pos = 2 * pos + 1
        out[k] = pos - capacity
    return out


def tree_update_many_numpy(tree, capacity, idxs, values):
    tree[idxs + capacity] = values
    pos = np.unique((idxs + capacity) // 2)
    while pos.size and pos[0] >= 1:
        tree[pos] = tree[2 * pos] + tree[2 * pos + 1]
        pos = np.unique(pos // 2)
        pos = pos[pos >= 1]


def tree_sample_numpy(tree, capacity, targets):
    u = targets.astype(np.float64).copy()
    pos = np.ones(targets.shape[0], dtype=np.int64)
    while pos[0] < capacity:
        left = tree[2 * pos]
        go_right = u >= left
        u = np.where(go_right, u - left, u)
        pos = 2 * pos + go_right
    return pos - capacity


# -- fused Adam update --------------------------------------------------------------


def adam_update_loop(p, g, m, v, lr, b1, b2, eps, c1, c2):
    fp = p.reshape(-1)
    fg = g.reshape(-1)
    fm = m.reshape(-1)
    fv = v.reshape(-1)
    for k in range(fp.shape[0]):
        gk = fg[k]
        fm[k] = b1 * fm[k] + (1.0 - b1) * gk
        fv[k] = b2 * fv[k] + (1.0 - b2) * gk * gk
        fp[k] -= lr * (fm[k] / c1) / (np.sqrt(fv[k] / c2) + eps)


def adam_update_numpy(p, g, m, v, lr, b1, b2, eps, c1, c2):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- dispatch ------------------------------------------------------------------------

if HAVE_NUMBA:
    gae_jit = _njit(gae_loop)
    rank_metrics_jit = _njit(rank_metrics_loop)
    tree_update_many_jit = _njit(tree_update_many_loop)
    tree_sample_jit = _njit(tree_sample_loop)
    adam_update_jit = _njit(adam_update_loop)
else:  # pragma: no cover
    adam_update_jit = adam_update_loop
    gae_jit, rank_metrics_jit = gae_loop, rank_metrics_loop
    tree_update_many_jit, tree_sample_jit = tree_update_many_loop, tree_sample_loop


def gae(rewards, values, dones, last_values, gamma, lam):
    args = (
        np.ascontiguousarray(rewards, dtype=np.float64),
        np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(dones, dtype=np.float64),
        np.ascontiguousarray(last_values, dtype=np.float64),
        float(gamma),
        float(lam),
    )
    return gae_jit(*args) if USE_NUMBA else gae_numpy(*args)


def rank_metrics(sorted_scores, sorted_labels):
    s = np.ascontiguousarray(sorted_scores, dtype=np.float64)
    y = np.ascontiguousarray(sorted_labels, dtype=np.float64)
    return rank_metrics_jit(s, y) if USE_NUMBA else rank_metrics_numpy(s, y)


def tree_update_many(tree, capacity, idxs, values):
    idxs = np.ascontiguousarray(idxs, dtype=np.int64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if USE_NUMBA:
        tree_update_many_jit(tree, capacity, idxs, values)
    else:
        tree_update_many_numpy(tree, capacity, idxs, values)


def tree_sample(tree, capacity, targets):
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    return tree_sample_jit(tree, capacity, targets) if USE_NUMBA else tree_sample_numpy(tree, capacity, targets)


def adam_update(p, g, m, v, lr, b1, b2, eps, c1, c2):
    """In-place Adam moment and parameter update on contiguous float64 arrays."""
    g = np.ascontiguousarray(g, dtype=np.float64)
    if USE_NUMBA and p.flags.c_contiguous:
        adam_update_jit(p, g, m, v, lr, b1, b2, eps, c1, c2)
    else:
        adam_update_numpy(p, g, m, v, lr, b1, b2, eps, c1, c2)
