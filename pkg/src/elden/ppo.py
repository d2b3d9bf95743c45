"""PPO with GAE over factored-state environments, shared by every exploration method."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .schema import FactorSchema
from .tensorcore import AdamState, Tensor, adam_step, exp, grad, log_softmax, matmul, no_grad, tanh


@dataclass
class PPOConfig:
    lr: float = 1e-4
    clip: float = 0.1
    gae_lambda: float = 0.98
    gamma: float = 0.99
    batch_size: int = 32
    epochs: int = 10
    hidden: tuple[int, ...] = (128, 128)
    n_envs: int = 20
    n_steps: int = 60
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    value_clip: bool = False
    # minimum transitions per policy update ("target steps")
    target_steps: int = 250

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip ratio must lie in (0, 1)")
        for name in ("gae_lambda", "gamma"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 1 or self.n_envs < 1 or self.n_steps < 1:
            raise ValueError("batch size, epochs, n_envs and n_steps must be >= 1")


def encode_state(schema: FactorSchema, states) -> np.ndarray:
    """One-hot categorical factors and raw real factors, concatenated."""
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    off = schema.input_offsets
    x = np.zeros((s.shape[0], int(off[schema.n])))
    rows = np.arange(s.shape[0])
    for k, f in enumerate(schema.factors):
        c = schema.col_offsets[k]
        if f.kind == "cat":
            x[rows, off[k] + s[:, c].astype(np.int64)] = 1.0
        else:
            x[:, off[k] : off[k] + f.size] = s[:, c : c + f.size]
    return x


class PolicyValueNet:
    """Separate tanh MLPs for the policy logits and the state value over one shared encoding."""

    def __init__(self, schema: FactorSchema, hidden=(128, 128), seed: int = 0):
        self.schema = schema
        rng = np.random.default_rng(seed)
        d_in = int(schema.input_offsets[schema.n])
        self.params: dict[str, Tensor] = {}
        for head, d_out in (("pi", schema.n_actions), ("v", 1)):
            width = d_in
            for k, h in enumerate(hidden):
                self._add(f"{head}.w{k}", rng.uniform(-1, 1, (width, h)) / math.sqrt(width))
                self._add(f"{head}.b{k}", np.zeros((1, h)))
                width = h
            # small policy output keeps the initial policy near uniform
            scale = 0.01 if head == "pi" else 1.0
            self._add(f"{head}.out", rng.uniform(-1, 1, (width, d_out)) * scale / math.sqrt(width))
            self._add(f"{head}.bout", np.zeros((1, d_out)))
        self.depth = len(hidden)

    def _add(self, name, arr):
        self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def _mlp(self, head: str, x: Tensor) -> Tensor:
        p = self.params
        h = x
        for k in range(self.depth):
            h = tanh(matmul(h, p[f"{head}.w{k}"]) + p[f"{head}.b{k}"])
        return matmul(h, p[f"{head}.out"]) + p[f"{head}.bout"]

    def forward(self, x: np.ndarray) -> tuple[Tensor, Tensor]:
        """(log-probabilities (B, A), values (B,))."""
        xt = Tensor(x)
        logp = log_softmax(self._mlp("pi", xt), axis=-1)
        v = self._mlp("v", xt)
        return logp, v.reshape(x.shape[0])

    def act(self, x: np.ndarray, rng: np.random.Generator):
        with no_grad():
            logp, v = self.forward(x)
        lp = logp.data
        probs = np.exp(lp)
        u = rng.random(x.shape[0])
        a = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
        a = np.minimum(a, probs.shape[1] - 1)
        return a, lp[np.arange(len(a)), a], v.data.copy()

    def log_prob(self, x: np.ndarray, actions) -> np.ndarray:
        with no_grad():
            logp, _ = self.forward(x)
        return logp.data[np.arange(len(actions)), np.asarray(actions)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


@dataclass
class RolloutBatch:
    states: np.ndarray  # (T, E, cols)
    actions: np.ndarray  # (T, E)
    log_probs: np.ndarray
    values: np.ndarray
    task_rewards: np.ndarray
    intrinsic: np.ndarray
    rewards: np.ndarray  # combined, with truncation bootstrap folded in
    dones: np.ndarray  # episode ended (terminal or truncated)
    next_states: np.ndarray
    last_values: np.ndarray  # (E,) bootstrap for the state after the last step
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    # per finished episode: (task return, success, normalized stage)
    episodes: list[tuple[float, bool, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.actions.size


class VecEnv:
    """E independently seeded environments stepped in lockstep with auto-reset."""

    def __init__(self, envs: list, seeds: list[int]):
        self.envs = envs
        self.seeds = [np.random.default_rng(s) for s in seeds]
        self.states = np.stack([e.reset(seed=int(r.integers(2**63))) for e, r in zip(envs, self.seeds)])
        self.ep_return = np.zeros(len(envs))

    def reset_one(self, i: int) -> np.ndarray:
        self.ep_return[i] = 0.0
        return self.envs[i].reset(seed=int(self.seeds[i].integers(2**63)))


def collect_rollouts(net: PolicyValueNet, venv: VecEnv, n_steps: int, rng: np.random.Generator,
                     intrinsic_fn: Callable | None = None, beta: float = 0.0, gamma: float = 0.99) -> RolloutBatch:
    """Step all envs ``n_steps`` times under the current policy.

    Intrinsic rewards are computed for the whole batch afterwards (the models
    behind ``intrinsic_fn`` stay frozen during collection). A time-limit
    truncation adds gamma * V(final state) to that step's reward so the
    episode boundary can be treated as terminal.
    """
    schema = venv.envs[0].schema
    e_count = len(venv.envs)
    cols = schema.state_columns
    states = np.zeros((n_steps, e_count, cols))
    next_states = np.zeros((n_steps, e_count, cols))
    actions = np.zeros((n_steps, e_count), dtype=np.int64)
    logps = np.zeros((n_steps, e_count))
    values = np.zeros((n_steps, e_count))
    task = np.zeros((n_steps, e_count))
    dones = np.zeros((n_steps, e_count))
    trunc_boot = np.zeros((n_steps, e_count))
    truncated_at: list[tuple[int, int, np.ndarray]] = []
    episodes = []
    for t in range(n_steps):
        obs = venv.states.copy()
        a, lp, v = net.act(encode_state(schema, obs), rng)
        states[t], actions[t], logps[t], values[t] = obs, a, lp, v
        for i, env in enumerate(venv.envs):
            try:
                res = env.step(int(a[i]))
            except Exception as exc:
                raise RuntimeError(f"env {i} ({env.name}) failed at rollout step {t}: {exc}") from exc
            next_states[t, i] = res.next_state
            task[t, i] = res.reward
            venv.ep_return[i] += res.reward
            if res.done or res.truncated:
                dones[t, i] = 1.0
                if res.truncated and not res.done:
                    truncated_at.append((t, i, res.next_state))
                episodes.append((float(venv.ep_return[i]), bool(env.is_success(res.next_state)),
                                 float(env.tracker.normalized)))
                venv.states[i] = venv.reset_one(i)
            else:
                venv.states[i] = res.next_state
    if truncated_at:
        xs = encode_state(schema, np.stack([s for _, _, s in truncated_at]))
        with no_grad():
            _, vb = net.forward(xs)
        for (t, i, _), val in zip(truncated_at, vb.data):
            trunc_boot[t, i] = gamma * val
    with no_grad():
        _, lv = net.forward(encode_state(schema, venv.states))
    flat = lambda z: z.reshape(n_steps * e_count, *z.shape[2:])
    if intrinsic_fn is not None and beta != 0.0:
        intr = np.asarray(intrinsic_fn(flat(states), flat(actions), flat(next_states)), dtype=np.float64)
        intr = intr.reshape(n_steps, e_count)
    else:
        intr = np.zeros((n_steps, e_count))
    rewards = task + beta * intr + trunc_boot
    return RolloutBatch(states, actions, logps, values, task, intr, rewards, dones, next_states,
                        lv.data.copy(), episodes=episodes)


def gae(batch: RolloutBatch, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """delta_t = r_t + gamma V(s_{t+1})(1 - done_t) - V(s_t); A_t = sum_k (gamma lam)^k delta_{t+k}."""
    adv = _kernels.gae(batch.rewards, batch.values, batch.dones, batch.last_values, gamma, lam)
    ret = adv + batch.values
    batch.advantages, batch.returns = adv, ret
    return adv, ret


def normalize(adv: np.ndarray) -> np.ndarray:
    sd = adv.std()
    return (adv - adv.mean()) / max(sd, 1e-8)


@dataclass
class UpdateStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    approx_kl: float = 0.0
    clip_frac: float = 0.0
    first_ratio_max_dev: float = math.nan
    skipped: int = 0


def ppo_update(net: PolicyValueNet, batch: RolloutBatch, config: PPOConfig, adam: AdamState,
               rng: np.random.Generator) -> UpdateStats:
    """Clipped-surrogate epochs over shuffled minibatches."""
    if batch.advantages is None:
        gae(batch, config.gamma, config.gae_lambda)
    schema = net.schema
    n = len(batch)
    x_all = encode_state(schema, batch.states.reshape(n, -1))
    a_all = batch.actions.reshape(n)
    old_lp = batch.log_probs.reshape(n)
    old_v = batch.values.reshape(n)
    adv_all = normalize(batch.advantages.reshape(n))
    ret_all = batch.returns.reshape(n)
    names = list(net.params)
    stats = UpdateStats()
    pl, vl, ent, kl, cf, count = 0.0, 0.0, 0.0, 0.0, 0.0, 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            mb = order[lo : lo + config.batch_size]
            m = len(mb)
            logp, v = net.forward(x_all[mb])
            onehot = np.zeros((m, schema.n_actions))
            onehot[np.arange(m), a_all[mb]] = 1.0
            new_lp = (logp * Tensor(onehot)).sum(axis=1)
            ratio = exp(new_lp - Tensor(old_lp[mb]))
            r = ratio.data
            if epoch == 0 and lo == 0:
                stats.first_ratio_max_dev = float(np.max(np.abs(r - 1.0)))
            a = adv_all[mb]
            clipped = np.clip(r, 1.0 - config.clip, 1.0 + config.clip)
            # the min picks the unclipped branch where it is smaller; the clipped
            # branch is constant in the parameters
            active = (r * a <= clipped * a).astype(np.float64)
            surr = ratio * Tensor(a * active) + Tensor((1.0 - active) * clipped * a)
            policy_loss = -surr.mean()
            if config.value_clip:
                v_cl = old_v[mb] + np.clip(v.data - old_v[mb], -config.clip, config.clip)
                use_clip = (v_cl - ret_all[mb]) ** 2 > (v.data - ret_all[mb]) ** 2
                err_raw = v - Tensor(ret_all[mb])
                err = err_raw * Tensor(1.0 - use_clip) + Tensor(use_clip * (v_cl - ret_all[mb]))
            else:
                err = v - Tensor(ret_all[mb])
            value_loss = (err * err).mean()
            probs = exp(logp)
            entropy = -(probs * logp).sum(axis=1).mean()
            loss = policy_loss + value_loss * config.vf_coef - entropy * config.ent_coef
            if not np.isfinite(loss.item()):
                stats.skipped += 1
                continue
            gs = grad(loss, [net.params[k] for k in names])
            if not adam_step(net.params, {k: g.data for k, g in zip(names, gs)}, adam):
                stats.skipped += 1
            pl += policy_loss.item()
            vl += value_loss.item()
            ent += entropy.item()
            kl += float(np.mean(old_lp[mb] - new_lp.data))
            cf += float(np.mean(np.abs(r - 1.0) > config.clip))
            count += 1
    if count:
        stats.policy_loss, stats.value_loss = pl / count, vl / count
        stats.entropy, stats.approx_kl, stats.clip_frac = ent / count, kl / count, cf / count
    return stats

