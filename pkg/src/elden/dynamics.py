"""Factored dynamics model, its training loss, Mixup and the prioritized buffer.

Architecture (one trunk shared by all targets, per-target heads):

1. every input token (N factors + action) goes through its own two-layer ReLU
   extractor, giving features ``g^i``;
2. one multi-head self-attention block (no bias, residual) and a two-layer
   post-attention net turn ``g`` into ``h``;
3. target ``j`` queries ``h`` with its own projection of ``h^j`` and feeds the
   attended vector through its own two-layer net and output layer, which is
   zero-initialized so an untrained model predicts uniform classes / zero means.

Real targets are unit-variance normals around the predicted mean.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .schema import FactorSchema
from .tensorcore import (
    AdamState,
    Tensor,
    adam_step,
    concat,
    getitem,
    grad,
    load_tensors,
    log_softmax,
    matmul,
    maximum,
    mul,
    no_grad,
    relu,
    reshape,
    save_tensors,
    softmax,
    sum_,
    transpose,
)
from .tensorcore import abs_ as tabs

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)
_PAD_LOGIT = -1e9
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class DynamicsConfig:
    hidden: tuple[int, ...] = (64, 64)
    heads: int = 4
    head_size: int = 16
    attn_out: int = 64
    post_attn: tuple[int, ...] = (64, 64)
    lam: float = 1e-3
    anneal_start: int = 5_000
    anneal_end: int = 10_000
    mixup: bool = True
    mixup_alpha: float = 1.0
    lr: float = 3e-4
    batch_size: int = 32
    priority_exponent: float = 0.5
    capacity: int = 200_000
    # pCMI training: probability of zeroing one random input's feature per sample
    feature_dropout: float = 0.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.post_attn = tuple(int(h) for h in self.post_attn)
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.anneal_start > self.anneal_end:
            raise ValueError("lambda annealing start must not exceed its end")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup alpha must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.priority_exponent < 0:
            raise ValueError("priority exponent must be >= 0")
        if self.attn_out != self.hidden[-1]:
            raise ValueError("attention output size must equal the extractor width (residual connection)")
        if not 0.0 <= self.feature_dropout <= 1.0:
            raise ValueError("feature dropout must lie in [0, 1]")


def lambda_eff(config: DynamicsConfig, batch_index: int) -> float:
    """Penalty weight after linear annealing from ``anneal_start`` to ``anneal_end``."""
    if config.anneal_end == config.anneal_start:
        frac = 1.0 if batch_index >= config.anneal_end else 0.0
    else:
        frac = (batch_index - config.anneal_start) / (config.anneal_end - config.anneal_start)
    return config.lam * min(max(frac, 0.0), 1.0)


# -- encoding -------------------------------------------------------------------


def encode(schema: FactorSchema, states, actions) -> np.ndarray:
    """Flat model input (B, D): one-hot categorical factors, raw real factors, one-hot action."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_1d(np.asarray(actions)).astype(np.int64)
    schema.validate_state(states)
    if np.any(actions < 0) or np.any(actions >= schema.n_actions):
        raise ValueError(f"action out of range [0, {schema.n_actions})")
    off = schema.input_offsets
    rows = np.arange(states.shape[0])
    x = np.zeros((states.shape[0], int(off[-1])))
    for k, f in enumerate(schema.factors):
        c = schema.col_offsets[k]
        if f.kind == "cat":
            x[rows, off[k] + states[:, c].astype(np.int64)] = 1.0
        else:
            x[:, off[k] : off[k] + f.size] = states[:, c : c + f.size]
    x[rows, off[schema.n] + actions] = 1.0
    return x


def split_inputs(schema: FactorSchema, x: np.ndarray) -> list[np.ndarray]:
    off = schema.input_offsets
    return [x[..., off[k] : off[k + 1]] for k in range(schema.n + 1)]


def target_width(schema: FactorSchema) -> int:
    return max(f.size for f in schema.factors)


def encode_labels(schema: FactorSchema, next_states) -> np.ndarray:
    """Targets (B, N, Cmax): one-hot classes, or real values padded with zeros."""
    s = np.atleast_2d(np.asarray(next_states, dtype=np.float64))
    schema.validate_state(s)
    out = np.zeros((s.shape[0], schema.n, target_width(schema)))
    rows = np.arange(s.shape[0])
    for k, f in enumerate(schema.factors):
        c = schema.col_offsets[k]
        if f.kind == "cat":
            out[rows, k, s[:, c].astype(np.int64)] = 1.0
        else:
            out[:, k, : f.size] = s[:, c : c + f.size]
    return out


@dataclass
class Batch:
    x: np.ndarray  # (B, D) encoded inputs, possibly blended
    labels: np.ndarray  # (B, N, Cmax)
    idx: np.ndarray | None = None  # buffer slots the records came from

    def __len__(self) -> int:
        return self.x.shape[0]


def make_batch(schema: FactorSchema, states, actions, next_states, idx=None) -> Batch:
    return Batch(encode(schema, states, actions), encode_labels(schema, next_states), idx)


def mixup_batch(batch: Batch, alpha: float, rng: np.random.Generator, lam: np.ndarray | None = None,
                perm: np.ndarray | None = None) -> Batch:
    """Blend each record with a random partner from the same batch.

    ``lam`` (one coefficient per record, drawn from Beta(alpha, alpha) when
    omitted) multiplies the record itself; the partner gets ``1 - lam``.
    Inputs (including the action one-hot) and labels are blended alike.
    """
    b = len(batch)
    if b < 2:
        raise ValueError("mixup needs a batch of at least 2 records")
    if lam is None:
        lam = rng.beta(alpha, alpha, size=b)
    if perm is None:
        perm = rng.permutation(b)
    lam = np.asarray(lam, dtype=np.float64).reshape(b)
    x = lam[:, None] * batch.x + (1.0 - lam[:, None]) * batch.x[perm]
    y = lam[:, None, None] * batch.labels + (1.0 - lam[:, None, None]) * batch.labels[perm]
    return Batch(x, y, batch.idx)


# -- model ------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class NonFiniteError(FloatingPointError):
    pass


class DynamicsModel:
    """Parameters live in ``self.params`` (name -> Tensor, all float64)."""

    def __init__(self, schema: FactorSchema, config: DynamicsConfig | None = None, seed: int = 0):
        self.schema = schema
        self.config = config or DynamicsConfig()
        self.seed = seed
        self.extra: dict = {}
        cfg = self.config
        n, t = schema.n, schema.n + 1
        dims = schema.input_dims
        self.n_inputs = t
        self.d_max = max(dims)
        self.c_max = target_width(schema)
        off = schema.input_offsets
        d_total = int(off[-1])
        # gather map from flat input columns to padded tokens; d_total is a zero column
        gather = np.full((t, self.d_max), d_total, dtype=np.int64)
        for i in range(t):
            gather[i, : dims[i]] = np.arange(off[i], off[i + 1])
        self._gather = gather
        self.is_cat = np.array([f.kind == "cat" for f in schema.factors])
        pad = np.zeros((n, 1, self.c_max))
        real_dims = np.zeros((n, 1, self.c_max))
        for j, f in enumerate(schema.factors):
            if f.kind == "cat":
                pad[j, 0, f.size :] = _PAD_LOGIT
            else:
                real_dims[j, 0, : f.size] = 1.0
        self._pad = Tensor(pad)
        self._real_dims = Tensor(real_dims)

        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}

        def add(name, arr):
            p[name] = Tensor(arr, requires_grad=True, name=name)

        width = self.d_max
        for k, h in enumerate(cfg.hidden):
            add(f"feat.w{k}", _uniform(rng, (t, width, h), width))
            add(f"feat.b{k}", np.zeros((t, 1, h)))
            width = h
        hid = width
        qkv = cfg.heads * cfg.head_size
        for name in ("q", "k", "v"):
            add(f"attn.w{name}", _uniform(rng, (hid, qkv), hid))
        add("attn.wo", _uniform(rng, (qkv, cfg.attn_out), qkv))
        width = cfg.attn_out
        for k, h in enumerate(cfg.post_attn):
            add(f"post.w{k}", _uniform(rng, (width, h), width))
            add(f"post.b{k}", np.zeros((1, 1, h)))
            width = h
        trunk = width
        add("head.wq", _uniform(rng, (n, trunk, qkv), trunk))
        add("head.wk", _uniform(rng, (trunk, qkv), trunk))
        add("head.wv", _uniform(rng, (trunk, qkv), trunk))
        add("head.wo", _uniform(rng, (n, qkv, cfg.attn_out), qkv))
        width = cfg.attn_out
        for k, h in enumerate(cfg.hidden):
            add(f"out.w{k}", _uniform(rng, (n, width, h), width))
            add(f"out.b{k}", np.zeros((n, 1, h)))
            width = h
        add("out.w", np.zeros((n, width, self.c_max)))
        add("out.b", np.zeros((n, 1, self.c_max)))
        self.params = p
        self.last_attention: tuple[np.ndarray, np.ndarray] | None = None

    # -- forward --------------------------------------------------------------
    def _heads(self, z: Tensor, lead: tuple) -> Tensor:
        cfg = self.config
        return reshape(z, lead + (cfg.heads, cfg.head_size))

    def forward(self, x: Tensor, drop: np.ndarray | None = None, keep_attention: bool = False) -> Tensor:
        """Raw outputs (N, B, Cmax): class logits (padded classes masked) or means.

        ``drop`` is an optional (B, N+1) 0/1 array multiplying each input's
        extracted feature (used by the masked pCMI model).
        """
        p, cfg = self.params, self.config
        b = x.shape[0]
        t, n = self.n_inputs, self.schema.n
        xz = concat([x, Tensor(np.zeros((b, 1)))], axis=1)
        tok = transpose(getitem(xz, (slice(None), self._gather)), (1, 0, 2))  # (T, B, Dmax)
        g = tok
        for k in range(len(cfg.hidden)):
            g = relu(matmul(g, p[f"feat.w{k}"]) + p[f"feat.b{k}"])
        if drop is not None:
            g = mul(g, Tensor(np.asarray(drop, dtype=np.float64).T[:, :, None]))
        g = transpose(g, (1, 0, 2))  # (B, T, H)
        scale = 1.0 / math.sqrt(cfg.head_size)
        q = transpose(self._heads(matmul(g, p["attn.wq"]), (b, t)), (0, 2, 1, 3))
        k_ = transpose(self._heads(matmul(g, p["attn.wk"]), (b, t)), (0, 2, 3, 1))
        v = transpose(self._heads(matmul(g, p["attn.wv"]), (b, t)), (0, 2, 1, 3))
        a_self = softmax(matmul(q, k_) * scale, axis=-1)  # (B, heads, T, T)
        o = reshape(transpose(matmul(a_self, v), (0, 2, 1, 3)), (b, t, cfg.heads * cfg.head_size))
        z = g + matmul(o, p["attn.wo"])
        for k in range(len(cfg.post_attn)):
            z = relu(matmul(z, p[f"post.w{k}"]) + p[f"post.b{k}"])
        # per-target query from h^j; keys and values are shared projections of h
        hq = transpose(getitem(z, (slice(None), slice(0, n))), (1, 0, 2))  # (N, B, H)
        q2 = transpose(self._heads(matmul(hq, p["head.wq"]), (n, b)), (1, 2, 0, 3))  # (B, heads, N, d)
        k2 = transpose(self._heads(matmul(z, p["head.wk"]), (b, t)), (0, 2, 3, 1))
        v2 = transpose(self._heads(matmul(z, p["head.wv"]), (b, t)), (0, 2, 1, 3))
        a_head = softmax(matmul(q2, k2) * scale, axis=-1)  # (B, heads, N, T)
        o2 = reshape(transpose(matmul(a_head, v2), (2, 0, 1, 3)), (n, b, cfg.heads * cfg.head_size))
        y = matmul(o2, p["head.wo"])
        for k in range(len(cfg.hidden)):
            y = relu(matmul(y, p[f"out.w{k}"]) + p[f"out.b{k}"])
        out = matmul(y, p["out.w"]) + p["out.b"]
        if keep_attention:
            self.last_attention = (a_self.data.copy(), a_head.data.copy())
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("dynamics forward: non-finite values in the output layer")
        return out

    def log_likelihood(self, x: Tensor, labels: np.ndarray, drop=None) -> tuple[Tensor, int]:
        """Per-record, per-target log p̂ of (possibly soft) labels: (B, N), plus clamp incidents.

        Categorical log-probabilities are floored at log(1e-12).
        """
        return self.log_likelihood_of(self.forward(x, drop), labels)

    def log_likelihood_of(self, out: Tensor, labels: np.ndarray) -> tuple[Tensor, int]:
        lab = Tensor(np.transpose(labels, (1, 0, 2)))  # (N, B, Cmax)
        cat = Tensor(self.is_cat[:, None].astype(np.float64))
        logp_raw = log_softmax(out + self._pad, axis=-1)
        clamped = int(np.sum((logp_raw.data < LOG_FLOOR) & (lab.data > 0) & self.is_cat[:, None, None]))
        logp = maximum(logp_raw, LOG_FLOOR)
        ll_cat = sum_(mul(lab, logp), axis=-1)  # (N, B)
        diff = mul(lab - out, self._real_dims)
        dims = Tensor(self._real_dims.data.sum(axis=-1))  # (N, 1)
        ll_real = sum_(mul(diff, diff), axis=-1) * -0.5 - dims * _HALF_LOG_2PI
        ll = mul(ll_cat, cat) + mul(ll_real, 1.0 - cat)
        return transpose(ll, (1, 0)), clamped

    def score(self, x: Tensor, labels: np.ndarray) -> Tensor:
        """Scalar per target whose input derivative defines dependency: (B, N).

        Categorical targets use log p̂ of the label; real targets use the
        sum of the predicted mean's dimensions.
        """
        out = self.forward(x)
        lab = Tensor(np.transpose(labels, (1, 0, 2)))
        cat = Tensor(self.is_cat[:, None].astype(np.float64))
        logp = maximum(log_softmax(out + self._pad, axis=-1), LOG_FLOOR)
        s_cat = sum_(mul(lab, logp), axis=-1)
        s_real = sum_(mul(out, self._real_dims), axis=-1)
        return transpose(mul(s_cat, cat) + mul(s_real, 1.0 - cat), (1, 0))

    def predict_labels(self, x: np.ndarray) -> np.ndarray:
        """Most likely next value per target as a label array (B, N, Cmax)."""
        with no_grad():
            out = self.forward(Tensor(x))
        return self.labels_from_output(out.data)

    def labels_from_output(self, out: np.ndarray) -> np.ndarray:
        b = out.shape[1]
        lab = np.zeros((b, self.schema.n, self.c_max))
        for j, f in enumerate(self.schema.factors):
            if f.kind == "cat":
                lab[np.arange(b), j, np.argmax(out[j, :, : f.size], axis=1)] = 1.0
            else:
                lab[:, j, : f.size] = out[j, :, : f.size]
        return lab

    # -- state -------------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise ValueError(f"checkpoint parameter names differ: {sorted(missing)}")
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"checkpoint tensor {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        """Tensors to ``path``; schema, config, seed and ``extra`` to ``path.json``."""
        path = Path(path)
        save_tensors(path, self.state_dict())
        meta = {"schema": self.schema.to_dict(), "config": asdict(self.config), "seed": self.seed,
                "extra": extra or {}}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "DynamicsModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        cfg = DynamicsConfig(**meta["config"])
        model = cls(FactorSchema.from_dict(meta["schema"]), cfg, meta.get("seed", 0))
        model.load_state_dict(load_tensors(path))
        model.extra = meta.get("extra", {})
        return model


def predict(model: DynamicsModel, states, actions) -> list[np.ndarray]:
    """Per-factor predictive distributions: class probabilities (B, C_j) or means (B, d_j)."""
    x = encode(model.schema, states, actions)
    with no_grad():
        out = model.forward(Tensor(x)).data
    res = []
    for j, f in enumerate(model.schema.factors):
        if f.kind == "cat":
            z = out[j, :, : f.size]
            z = z - z.max(axis=1, keepdims=True)
            e = np.exp(z)
            res.append(e / e.sum(axis=1, keepdims=True))
        else:
            res.append(out[j, :, : f.size].copy())
    return res


@dataclass
class LossParts:
    loss: Tensor
    per_record: np.ndarray  # (B,) summed NLL over targets
    clamped: int


def nll_loss(model: DynamicsModel, batch: Batch, drop=None) -> LossParts:
    """Mean over the batch of the summed per-target negative log-likelihood."""
    ll, clamped = model.log_likelihood(Tensor(batch.x), batch.labels, drop)
    per = -sum_(ll, axis=1)
    return LossParts(per.mean(), per.data.copy(), clamped)


def jacobian_penalty(model: DynamicsModel, batch: Batch) -> Tensor:
    """Batch mean of sum over input dims and targets of |d score_j / d input|.

    The batch is replicated once per target so a single recorded backward
    sweep (seeded with target j on the j-th copy) yields every target's input
    gradient; the result stays differentiable w.r.t. the parameters.
    """
    n, b = model.schema.n, len(batch)
    xr = Tensor(np.tile(batch.x, (n, 1)), requires_grad=True)
    labels = np.tile(batch.labels, (n, 1, 1))
    out = model.score(xr, labels)  # (N*B, N)
    seed = np.zeros(out.shape)
    for j in range(n):
        seed[j * b : (j + 1) * b, j] = 1.0
    (gx,) = grad(out, [xr], seed=seed, create_graph=True)
    return sum_(tabs(gx)) * (1.0 / b)


# -- prioritized replay ---------------------------------------------------------------


class PrioritizedBuffer:
    """Ring buffer of transitions sampled in proportion to priority**exponent.

    New records enter with the current maximum priority. Sampling uses a sum
    tree over the transformed priorities.
    """

    def __init__(self, schema: FactorSchema, capacity: int = 200_000, exponent: float = 0.5):
        if capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        self.schema = schema
        self.capacity = capacity
        self.exponent = exponent
        cols = schema.state_columns
        self.states = np.zeros((capacity, cols))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.next_states = np.zeros((capacity, cols))
        self.priorities = np.zeros(capacity)
        self._tree_cap = 1 << max(0, (capacity - 1).bit_length())
        self._tree = np.zeros(2 * self._tree_cap)
        self._max_priority = 1.0
        self.size = 0
        self.pos = 0

    def __len__(self) -> int:
        return self.size

    def fork(self) -> "PrioritizedBuffer":
        """A sampler over the same record storage with its own priorities.

        Storage arrays are shared; every fork must receive the same ``add``
        calls so positions stay aligned (re-writing a slot with identical
        values is harmless).
        """
        other = object.__new__(PrioritizedBuffer)
        other.__dict__.update(self.__dict__)
        other.priorities = self.priorities.copy()
        other._tree = self._tree.copy()
        return other

    def _weight(self, pr: np.ndarray) -> np.ndarray:
        return np.power(np.maximum(pr, 0.0), self.exponent)

    def add(self, states, actions, next_states) -> np.ndarray:
        states = np.atleast_2d(states)
        actions = np.atleast_1d(actions)
        next_states = np.atleast_2d(next_states)
        k = states.shape[0]
        slots = (self.pos + np.arange(k)) % self.capacity
        self.states[slots] = states
        self.actions[slots] = actions
        self.next_states[slots] = next_states
        self.priorities[slots] = self._max_priority
        _kernels.tree_update_many(self._tree, self._tree_cap, slots, self._weight(self.priorities[slots]))
        self.pos = int((self.pos + k) % self.capacity)
        self.size = min(self.size + k, self.capacity)
        return slots

    def probabilities(self) -> np.ndarray:
        w = self._weight(self.priorities[: self.size])
        return w / w.sum()

    def sample(self, k: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        total = self._tree[1]
        if not np.isfinite(total) or total <= 0:
            return rng.integers(self.size, size=k)
        u = rng.random(k) * total
        idx = _kernels.tree_sample(self._tree, self._tree_cap, u)
        # guard against float round-off walking into an empty leaf
        return np.minimum(idx, self.size - 1)

    def update_priorities(self, idx, priorities) -> None:
        idx = np.asarray(idx, dtype=np.int64)
        pr = np.asarray(priorities, dtype=np.float64)
        ok = np.isfinite(pr)
        idx, pr = idx[ok], np.maximum(pr[ok], 1e-8)
        if idx.size == 0:
            return
        self.priorities[idx] = pr
        _kernels.tree_update_many(self._tree, self._tree_cap, idx, self._weight(pr))
        self._max_priority = max(self._max_priority, float(pr.max()))

    def batch(self, idx) -> Batch:
        return make_batch(self.schema, self.states[idx], self.actions[idx], self.next_states[idx], np.asarray(idx))


# -- training --------------------------------------------------------------------------


@dataclass
class Trainer:
    """Owns one model's optimizer state and sampling stream."""

    model: DynamicsModel
    config: DynamicsConfig
    rng: np.random.Generator
    adam: AdamState = field(init=False)
    batch_index: int = 0
    clamped: int = 0
    skipped: int = 0

    def __post_init__(self):
        self.adam = AdamState(lr=self.config.lr)


def _dropout_mask(b: int, t: int, p: float, rng: np.random.Generator) -> np.ndarray:
    mask = np.ones((b, t))
    hit = rng.random(b) < p
    mask[np.nonzero(hit)[0], rng.integers(t, size=int(hit.sum()))] = 0.0
    return mask


def train_step(trainer: Trainer, buffer: PrioritizedBuffer, batch_index: int | None = None) -> dict:
    """One Adam step on a prioritized batch; returns the loss components."""
    model, cfg, rng = trainer.model, trainer.config, trainer.rng
    if len(buffer) == 0:
        raise ValueError("train_step: buffer is empty")
    if batch_index is None:
        batch_index = trainer.batch_index
    idx = buffer.sample(cfg.batch_size, rng)
    raw = buffer.batch(idx)
    batch = raw
    blended = cfg.mixup and model.schema.is_discrete and len(raw) >= 2
    if blended:
        batch = mixup_batch(raw, cfg.mixup_alpha, rng)
    drop = None
    if cfg.feature_dropout > 0:
        drop = _dropout_mask(len(batch), model.n_inputs, cfg.feature_dropout, rng)
    parts = nll_loss(model, batch, drop)
    lam = lambda_eff(cfg, batch_index)
    loss = parts.loss
    penalty = float("nan")
    if lam > 0:
        pen = jacobian_penalty(model, batch)
        penalty = pen.item()
        loss = loss + pen * lam
    trainer.clamped += parts.clamped
    priorities = parts.per_record
    if buffer.exponent > 0 and (blended or drop is not None):
        # priorities track the error on the stored records themselves
        with no_grad():
            ll, _ = model.log_likelihood(Tensor(raw.x), raw.labels)
        priorities = -ll.data.sum(axis=1)
    value = loss.item()
    names = list(model.params)
    if np.isfinite(value):
        gs = grad(loss, [model.params[k] for k in names])
        ok = adam_step(model.params, {k: g.data for k, g in zip(names, gs)}, trainer.adam)
    else:
        ok = False
    if not ok:
        trainer.skipped += 1
    buffer.update_priorities(idx, priorities)
    trainer.batch_index = batch_index + 1
    return {
        "batch_index": batch_index,
        "nll": float(parts.per_record.mean()),
        "penalty": penalty,
        "lambda_eff": lam,
        "mean_priority": float(buffer.priorities[: buffer.size].mean()),
        "skipped": not ok,
    }


CURVE_FIELDS = ("batch_index", "nll", "penalty", "lambda_eff", "mean_priority")


def fit(trainer: Trainer, buffer: PrioritizedBuffer, n_batches: int, csv_path: str | Path | None = None,
        log_every: int = 100) -> list[dict]:
    """Run ``n_batches`` train steps; rows every ``log_every`` batches go to the curve CSV."""
    rows = []
    fh = open(csv_path, "w", newline="") if csv_path else None
    try:
        writer = None
        if fh:
            writer = csv.writer(fh)
            writer.writerow(CURVE_FIELDS)
        for _ in range(n_batches):
            info = train_step(trainer, buffer)
            if info["batch_index"] % log_every == 0 or info["batch_index"] == n_batches - 1:
                rows.append(info)
                if writer:
                    writer.writerow([_fmt(info[k]) for k in CURVE_FIELDS])
                    fh.flush()
    finally:
        if fh:
            fh.close()
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
