"""Local dependency graphs from a trained dynamics model, baselines and detection metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import _kernels
from .dynamics import DynamicsModel, encode, encode_labels
from .envs.base import FactoredEnv
from .schema import FactorSchema
from .tensorcore import PassCounter, Tensor, input_jacobian, no_grad

DEFAULT_EPS = 3e-4
CHUNK = 256


@dataclass
class LocalDependencyGraph:
    scores: np.ndarray  # (B, N+1, N), rows = inputs (factors then action), columns = targets
    edges: np.ndarray  # same shape, bool
    eps: float
    flagged: np.ndarray  # (B,) transitions whose derivatives were non-finite

    def threshold(self, eps: float) -> "LocalDependencyGraph":
        return LocalDependencyGraph(self.scores, self.scores >= eps, eps, self.flagged)


def factor_scores(schema: FactorSchema, per_dim: np.ndarray) -> np.ndarray:
    """Collapse (B, D, N) input-dimension scores to (B, N+1, N) by max |.| within each input."""
    off = schema.input_offsets
    a = np.abs(per_dim)
    return np.stack([a[:, off[i] : off[i + 1]].max(axis=1) for i in range(schema.n + 1)], axis=1)


def _labels_for(model: DynamicsModel, x: np.ndarray, next_states, counter: PassCounter | None = None):
    if next_states is None:
        if counter is not None:
            counter.forward += x.shape[0]
        return model.predict_labels(x)
    return encode_labels(model.schema, next_states)


def extract_graph(model: DynamicsModel, states, actions, next_states=None, eps: float = DEFAULT_EPS,
                  counter: PassCounter | None = None) -> LocalDependencyGraph:
    """Threshold |d log p̂(s'_j) / d input| at ``eps``.

    ``next_states`` gives the realized values whose likelihood is
    differentiated; without it the model's own most likely prediction is used.
    Flagged transitions get all-zero scores.
    """
    x = encode(model.schema, states, actions)
    labels = _labels_for(model, x, next_states, counter)
    parts, flags = [], []
    for lo in range(0, x.shape[0], CHUNK):
        xb, lb = x[lo : lo + CHUNK], labels[lo : lo + CHUNK]
        res = input_jacobian(lambda t, lb=lb: model.score(t, lb), xb, counter)
        parts.append(factor_scores(model.schema, res.values))
        flags.append(res.flagged)
    scores = np.concatenate(parts)
    return LocalDependencyGraph(scores, scores >= eps, eps, np.concatenate(flags))


def pcmi_scores(model: DynamicsModel, states, actions, next_states=None,
                counter: PassCounter | None = None) -> np.ndarray:
    """log p̂_full(s'_j) - log p̂_without-i(s'_j) for every input i: (B, N+1, N).

    ``model`` should be trained with feature dropout so that zeroing one
    input's extracted feature is an in-distribution query. Costs N+2 model
    applications per transition (the full input, then one per dropped input).
    """
    x = encode(model.schema, states, actions)
    b, t = x.shape[0], model.n_inputs
    with no_grad():
        xt = Tensor(x)
        out = model.forward(xt)
        # without realized values the full pass's own prediction is evaluated
        labels = model.labels_from_output(out.data) if next_states is None else encode_labels(model.schema, next_states)
        full, _ = model.log_likelihood_of(out, labels)
        if counter is not None:
            counter.forward += b
        res = np.zeros((b, t, model.schema.n))
        for i in range(t):
            drop = np.ones((b, t))
            drop[:, i] = 0.0
            ll, _ = model.log_likelihood(xt, labels, drop)
            res[:, i, :] = full.data - ll.data
            if counter is not None:
                counter.forward += b
    return res


def attention_scores(model: DynamicsModel, states, actions) -> np.ndarray:
    """Composed head-averaged attention: entry (i, j) = sum_k A_self[k <- i] * A_head[j <- k]."""
    x = encode(model.schema, states, actions)
    with no_grad():
        model.forward(Tensor(x), keep_attention=True)
    a_self, a_head = model.last_attention
    return compose_attention(a_self.mean(axis=1), a_head.mean(axis=1))


def compose_attention(a_self: np.ndarray, a_head: np.ndarray) -> np.ndarray:
    """``a_self`` (B, T, T) rows = querying token; ``a_head`` (B, N, T) rows = target."""
    # (B, i, j) = sum_k a_self[b, k, i] * a_head[b, j, k]
    return np.einsum("bki,bjk->bij", a_self, a_head)


# -- metrics ---------------------------------------------------------------------------


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.float64)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in size: {s.shape} vs {y.shape}")
    order = np.argsort(-s, kind="stable")
    return s[order], y[order]


def _single_class(y: np.ndarray) -> bool:
    p = y.sum()
    return p == 0 or p == y.shape[0]


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie); NaN when only one class is present."""
    s, y = _prepare(scores, labels)
    if _single_class(y):
        return math.nan
    return float(_kernels.rank_metrics(s, y)[0])


def best_f1(scores, labels) -> float:
    """Largest F1 over every threshold between distinct scores; NaN for single-class labels."""
    s, y = _prepare(scores, labels)
    if _single_class(y):
        return math.nan
    return float(_kernels.rank_metrics(s, y)[1])


def best_f1_threshold(scores, labels) -> float:
    """A score threshold (predict positive iff score >= threshold) attaining ``best_f1``."""
    s, y = _prepare(scores, labels)
    if _single_class(y):
        return math.inf
    ends = np.concatenate([np.nonzero(np.diff(s))[0], [s.shape[0] - 1]])
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    f1 = 2 * tp / (2 * tp + fp + (y.sum() - tp))
    return float(s[ends[int(np.argmax(f1))]])


@dataclass
class DetectionMetrics:
    roc_auc: float
    best_f1: float
    positive_rate: float
    # positives other than persistence self-edges, over all pairs
    positive_rate_nonpersistence: float = math.nan
    n_pairs: int = 0
    n_transitions: int = 0
    forward_passes: int = 0
    backward_passes: int = 0
    flagged: int = 0
    threshold: float = math.nan
    confusion: dict = field(default_factory=dict)


# -- detectors -----------------------------------------------------------------------------


class Detector:
    """Maps transitions to (B, N+1, N) dependency scores and counts its passes."""

    name = "detector"

    def __init__(self):
        self.counter = PassCounter()
        self.flagged = np.zeros(0, dtype=bool)

    def __call__(self, states, actions, next_states, graphs=None) -> np.ndarray:
        raise NotImplementedError


class EldenDetector(Detector):
    name = "elden"

    def __init__(self, model: DynamicsModel, eps: float = DEFAULT_EPS):
        super().__init__()
        self.model, self.eps = model, eps

    def __call__(self, states, actions, next_states, graphs=None):
        g = extract_graph(self.model, states, actions, next_states, self.eps, self.counter)
        self.flagged = g.flagged
        return g.scores


class PCMIDetector(Detector):
    name = "pcmi"

    def __init__(self, model: DynamicsModel):
        super().__init__()
        self.model = model

    def __call__(self, states, actions, next_states, graphs=None):
        s = pcmi_scores(self.model, states, actions, next_states, self.counter)
        self.flagged = ~np.isfinite(s).all(axis=(1, 2))
        return np.where(np.isfinite(s), s, 0.0)


class AttnDetector(Detector):
    name = "attn"

    def __init__(self, model: DynamicsModel):
        super().__init__()
        self.model = model

    def __call__(self, states, actions, next_states, graphs=None):
        self.counter.forward += len(actions)
        return attention_scores(self.model, states, actions)


class OracleDetector(Detector):
    """Scores are the ground-truth labels themselves."""

    name = "oracle"

    def __call__(self, states, actions, next_states, graphs=None):
        return np.asarray(graphs, dtype=np.float64)


class RandomDetector(Detector):
    name = "random"

    def __init__(self, seed: int = 0):
        super().__init__()
        self.rng = np.random.default_rng(seed)

    def __call__(self, states, actions, next_states, graphs=None):
        n = np.asarray(graphs).shape
        return self.rng.random(n)


def rollout_episodes(env: FactoredEnv, episodes: int, seed: int, epsilon: float = 0.5):
    """Fresh evaluation episodes under the epsilon-greedy scripted policy."""
    rng = np.random.default_rng(seed)
    env.rng = np.random.default_rng(rng.integers(2**63))
    s_, a_, n_, g_ = [], [], [], []
    for _ in range(episodes):
        state = env.reset(seed=int(rng.integers(2**63)))
        while True:
            if rng.random() < epsilon:
                a = int(rng.integers(env.schema.n_actions))
            else:
                a = env.scripted_action(state)
            res = env.step(a)
            s_.append(state)
            a_.append(a)
            n_.append(res.next_state)
            g_.append(res.graph)
            state = res.next_state
            if res.done or res.truncated:
                break
    return np.array(s_), np.array(a_, dtype=np.int64), np.array(n_), np.array(g_, dtype=bool)


def detection_metrics(scores: np.ndarray, graphs: np.ndarray, flagged=None) -> DetectionMetrics:
    """Metrics over all (input, target) pairs of all unflagged transitions."""
    scores = np.asarray(scores, dtype=np.float64)
    graphs = np.asarray(graphs, dtype=bool)
    if flagged is not None and len(flagged) == len(scores) and np.any(flagged):
        keep = ~np.asarray(flagged, dtype=bool)
        scores, graphs = scores[keep], graphs[keep]
    n = graphs.shape[2]
    persist = np.zeros(graphs.shape[1:], dtype=bool)
    persist[np.arange(n), np.arange(n)] = True
    thr = best_f1_threshold(scores, graphs)
    pred = scores >= thr
    confusion = {
        "tp": (pred & graphs).sum(axis=0).tolist(),
        "fp": (pred & ~graphs).sum(axis=0).tolist(),
        "fn": (~pred & graphs).sum(axis=0).tolist(),
        "tn": (~pred & ~graphs).sum(axis=0).tolist(),
    }
    return DetectionMetrics(
        roc_auc=roc_auc(scores, graphs),
        best_f1=best_f1(scores, graphs),
        positive_rate=float(graphs.mean()) if graphs.size else math.nan,
        positive_rate_nonpersistence=float((graphs & ~persist).mean()) if graphs.size else math.nan,
        n_pairs=int(graphs.size),
        n_transitions=int(graphs.shape[0]),
        threshold=thr,
        confusion=confusion,
    )


def evaluate_detection(detector: Detector | Callable, env: FactoredEnv, eval_episodes: int = 50,
                       seed: int = 10_000, data=None) -> DetectionMetrics:
    """Score fresh episodes (or the given (states, actions, next_states, graphs)) against ground truth."""
    if data is None:
        data = rollout_episodes(env, eval_episodes, seed)
    states, actions, next_states, graphs = data
    scores = detector(states, actions, next_states, graphs)
    flagged = getattr(detector, "flagged", None)
    m = detection_metrics(scores, graphs, flagged)
    counter = getattr(detector, "counter", None)
    if counter is not None:
        m.forward_passes = counter.forward
        m.backward_passes = counter.backward
    m.flagged = int(np.sum(flagged)) if flagged is not None else 0
    return m


REPORT_FIELDS = ("method", "env", "seed", "roc_auc", "best_f1", "positive_rate", "forward_passes")


def write_report(rows: list[dict], csv_path: str | Path, json_path: str | Path | None = None) -> None:
    """CSV with one row per (method, env, seed); JSON keeps everything incl. per-edge confusion."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in rows:
            w.writerow([r[k] if not isinstance(r[k], float) else repr(r[k]) for k in REPORT_FIELDS])
    if json_path is not None:
        Path(json_path).write_text(json.dumps(rows, indent=1, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def metrics_row(method: str, env: str, seed: int, m: DetectionMetrics) -> dict:
    return {"method": method, "env": env, "seed": seed, **asdict(m)}
