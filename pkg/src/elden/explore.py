"""Dynamics ensemble and intrinsic rewards (graph variance, disagreement, curiosity, action influence)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .depgraph import DEFAULT_EPS, extract_graph
from .dynamics import (
    DynamicsConfig,
    DynamicsModel,
    PrioritizedBuffer,
    Trainer,
    encode,
    encode_labels,
    predict,
    train_step,
)
from .schema import FactorSchema
from .tensorcore import Tensor, no_grad

KINDS = ("elden", "disagreement", "curiosity", "cai", "none")


def derive_seed(master: int, *path) -> int:
    """Stable 63-bit child seed of ``master`` along ``path`` (strings or ints)."""
    h = hashlib.sha256(repr((int(master),) + tuple(path)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


@dataclass
class RewardConfig:
    kind: str = "elden"
    beta: float = 1.0
    eps: float = DEFAULT_EPS
    # graph variance over raw scores instead of thresholded edges (ablation only)
    continuous: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown intrinsic reward {self.kind!r}; choose from {KINDS}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


@dataclass
class Incidents:
    flagged: int = 0
    clamped: int = 0


class DynamicsEnsemble:
    """M dynamics models differing only in initialization and sampling streams."""

    def __init__(self, schema: FactorSchema, config: DynamicsConfig | None = None, m: int = 5, seed: int = 0,
                 buffer: PrioritizedBuffer | None = None):
        if m < 1:
            raise ValueError("ensemble size must be >= 1")
        self.schema = schema
        self.config = config or DynamicsConfig()
        self.members = [DynamicsModel(schema, self.config, derive_seed(seed, "member", k)) for k in range(m)]
        self.trainers = [
            Trainer(mod, self.config, np.random.default_rng(derive_seed(seed, "sampler", k)))
            for k, mod in enumerate(self.members)
        ]
        base = buffer or PrioritizedBuffer(schema, self.config.capacity, self.config.priority_exponent)
        self.buffers = [base] + [base.fork() for _ in range(m - 1)]
        self.incidents = Incidents()

    def __len__(self) -> int:
        return len(self.members)

    def add(self, states, actions, next_states) -> None:
        for b in self.buffers:
            b.add(states, actions, next_states)

    def train(self, n_steps: int) -> list[dict]:
        """``n_steps`` updates for every member; returns the last step's info per member."""
        last = []
        for tr, buf in zip(self.trainers, self.buffers):
            info = {}
            for _ in range(n_steps):
                info = train_step(tr, buf)
            last.append(info)
        return last


# -- rewards ------------------------------------------------------------------------------


def edge_variance(graphs: np.ndarray) -> np.ndarray:
    """Mean over edges of the population variance across members; graphs (M, B, N+1, N)."""
    g = np.asarray(graphs, dtype=np.float64)
    return g.var(axis=0).mean(axis=(1, 2))


def elden_reward(ensemble: DynamicsEnsemble, states, actions, next_states=None,
                 eps: float | None = None, continuous: bool = False) -> np.ndarray:
    """Per-transition mean edge variance of the members' local dependency graphs.

    Transitions flagged by any member (non-finite derivatives) get reward 0.
    """
    eps = DEFAULT_EPS if eps is None else eps
    graphs, flagged = [], None
    for mod in ensemble.members:
        g = extract_graph(mod, states, actions, next_states, eps)
        graphs.append(g.scores if continuous else g.edges)
        flagged = g.flagged if flagged is None else flagged | g.flagged
    r = edge_variance(np.stack(graphs))
    if flagged is not None and flagged.any():
        ensemble.incidents.flagged += int(flagged.sum())
        r[flagged] = 0.0
    return r


def disagreement_reward(ensemble: DynamicsEnsemble, states, actions) -> np.ndarray:
    """Mean over output dimensions of the across-member variance of predictions."""
    preds = []
    for mod in ensemble.members:
        preds.append(np.concatenate(predict(mod, states, actions), axis=1))
    return np.stack(preds).var(axis=0).mean(axis=1)


def curiosity_reward(ensemble: DynamicsEnsemble, states, actions, next_states) -> np.ndarray:
    """Mean over members of the per-transition negative log-likelihood of the realized next state."""
    x = encode(ensemble.schema, states, actions)
    labels = encode_labels(ensemble.schema, next_states)
    total = np.zeros(x.shape[0])
    with no_grad():
        for mod in ensemble.members:
            ll, clamped = mod.log_likelihood(Tensor(x), labels)
            ensemble.incidents.clamped += clamped
            total += -ll.data.sum(axis=1)
    return total / len(ensemble.members)


def cai_reward(ensemble: DynamicsEnsemble, states, actions, next_states=None,
               eps: float | None = None) -> np.ndarray:
    """Mean over members of the number of factors the action row of the graph reaches."""
    eps = DEFAULT_EPS if eps is None else eps
    total = None
    for mod in ensemble.members:
        g = extract_graph(mod, states, actions, next_states, eps)
        count = g.edges[:, -1, :].sum(axis=1).astype(np.float64)
        count[g.flagged] = 0.0
        total = count if total is None else total + count
    return total / len(ensemble.members)


def combine(task_reward, intrinsic, beta: float):
    return np.asarray(task_reward, dtype=np.float64) + beta * np.asarray(intrinsic, dtype=np.float64)


def intrinsic_reward(ensemble: DynamicsEnsemble | None, config: RewardConfig, states, actions,
                     next_states) -> np.ndarray:
    n = len(actions)
    if config.kind == "none" or ensemble is None:
        return np.zeros(n)
    if config.kind == "elden":
        return elden_reward(ensemble, states, actions, next_states, config.eps, config.continuous)
    if config.kind == "disagreement":
        return disagreement_reward(ensemble, states, actions)
    if config.kind == "curiosity":
        return curiosity_reward(ensemble, states, actions, next_states)
    return cai_reward(ensemble, states, actions, next_states, config.eps)


@dataclass
class RewardStats:
    mean: float = 0.0
    max: float = 0.0
    frac_zero: float = 1.0
    extra: dict = field(default_factory=dict)

    @classmethod
    def of(cls, r: np.ndarray) -> "RewardStats":
        r = np.asarray(r, dtype=np.float64)
        if r.size == 0:
            return cls()
        return cls(float(r.mean()), float(r.max()), float(np.mean(r == 0.0)))
