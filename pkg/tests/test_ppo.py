from __future__ import annotations

import numpy as np
import pytest

from elden.envs import ThawingEnv
from elden.ppo import (
    PolicyValueNet,
    PPOConfig,
    RolloutBatch,
    VecEnv,
    collect_rollouts,
    encode_state,
    gae,
    normalize,
    ppo_update,
)
from elden.schema import Factor, FactorSchema
from elden.tensorcore import AdamState

BANDIT = FactorSchema((Factor("a", "cat", 2), Factor("b", "cat", 2)), n_actions=2)


def bandit_batch(net, rng, n=64):
    """One-step episodes from a constant state; action 0 pays 1."""
    s = np.zeros((n, 1, 2))
    a, lp, v = net.act(encode_state(BANDIT, s.reshape(n, 2)), rng)
    r = (a == 0).astype(float)[:, None]
    return RolloutBatch(s, a[:, None], lp[:, None], v[:, None], r, np.zeros((n, 1)), r, np.ones((n, 1)), s,
                        np.zeros(1))


def p_rewarded(net):
    return float(np.exp(net.log_prob(np.array([[1.0, 0.0, 1.0, 0.0]]), [0]))[0])


def hand_batch(rewards, values, dones, last):
    r = np.asarray(rewards, dtype=float)[:, None]
    z = np.zeros_like(r)
    return RolloutBatch(z, z.astype(int), z, np.asarray(values, dtype=float)[:, None], r, z, r,
                        np.asarray(dones, dtype=float)[:, None], z, np.array([last], dtype=float))


def gae_oracle(r, v, d, last, gamma, lam):
    """Direct sum of discounted TD errors, truncated at episode ends."""
    t_max = len(r)
    v_next = list(v[1:]) + [last]
    delta = [r[t] + gamma * v_next[t] * (1 - d[t]) - v[t] for t in range(t_max)]
    out = []
    for t in range(t_max):
        acc, w = 0.0, 1.0
        for k in range(t, t_max):
            acc += w * delta[k]
            if d[k]:
                break
            w *= gamma * lam
        out.append(acc)
    return np.array(out)


def test_gae_three_step_hand_example():
    b = hand_batch([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [0, 0, 1], 0.0)
    adv, ret = gae(b, 0.99, 0.98)
    assert abs(adv[0, 0] - (0.99 * 0.98) ** 2) <= 1e-12
    assert abs(adv[1, 0] - 0.99 * 0.98) <= 1e-12 and abs(adv[2, 0] - 1.0) <= 1e-12
    np.testing.assert_array_equal(ret, adv)


def test_gae_matches_direct_sum_with_values_and_resets():
    rng = np.random.default_rng(0)
    for _ in range(20):
        t = int(rng.integers(1, 12))
        r, v = rng.normal(size=t), rng.normal(size=t)
        d = (rng.random(t) < 0.3).astype(float)
        last = float(rng.normal())
        adv, _ = gae(hand_batch(r, v, d, last), 0.97, 0.9)
        np.testing.assert_allclose(adv[:, 0], gae_oracle(r, v, d, last, 0.97, 0.9), rtol=0, atol=1e-12)


def test_normalize():
    rng = np.random.default_rng(1)
    a = rng.normal(3.0, 2.0, 500)
    z = normalize(a)
    assert abs(z.mean()) <= 1e-10 and abs(z.std() - 1.0) <= 1e-10
    assert np.all(normalize(np.zeros(4)) == 0)


def test_config_validation():
    for kw in (dict(clip=0), dict(gamma=1.5), dict(gae_lambda=0), dict(batch_size=0), dict(n_envs=0)):
        with pytest.raises(ValueError):
            PPOConfig(**kw)


def test_bandit_converges():
    net = PolicyValueNet(BANDIT, seed=0)
    cfg = PPOConfig()
    adam = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(0)
    assert abs(p_rewarded(net) - 0.5) < 0.02
    for update in range(200):
        ppo_update(net, bandit_batch(net, rng), cfg, adam, rng)
        if p_rewarded(net) >= 0.95:
            break
    assert p_rewarded(net) >= 0.95


def test_first_minibatch_ratio_is_one():
    net = PolicyValueNet(BANDIT, seed=1)
    rng = np.random.default_rng(1)
    st = ppo_update(net, bandit_batch(net, rng), PPOConfig(), AdamState(lr=1e-4), rng)
    assert st.first_ratio_max_dev <= 1e-12


def test_zero_advantages_leave_policy_unchanged():
    net = PolicyValueNet(BANDIT, seed=2)
    rng = np.random.default_rng(2)
    b = bandit_batch(net, rng)
    b.advantages = np.zeros_like(b.rewards)
    b.returns = np.ones_like(b.rewards)
    before = net.state_dict()
    ppo_update(net, b, PPOConfig(epochs=2), AdamState(lr=1e-2), rng)
    after = net.state_dict()
    for k in before:
        if k.startswith("pi."):
            assert np.array_equal(before[k], after[k]), k
    assert not np.array_equal(before["v.bout"], after["v.bout"])


def make_venv(n_envs, seed, episode_length=30):
    envs = [ThawingEnv(episode_length=episode_length) for _ in range(n_envs)]
    return VecEnv(envs, [seed + i for i in range(n_envs)])


def test_rollout_shapes_and_episode_bookkeeping():
    net = PolicyValueNet(ThawingEnv().schema, hidden=(16,), seed=0)
    b = collect_rollouts(net, make_venv(3, 0), 40, np.random.default_rng(0))
    assert len(b) == 3 * 40 and b.states.shape[:2] == (40, 3)
    assert b.dones.sum() == len(b.episodes) >= 3
    # each step's state follows from the previous next state unless an episode ended
    for t in range(1, 40):
        for i in range(3):
            if not b.dones[t - 1, i]:
                assert np.array_equal(b.states[t, i], b.next_states[t - 1, i])


def test_zero_beta_rewards_are_task_rewards():
    net = PolicyValueNet(ThawingEnv().schema, hidden=(16,), seed=0)
    ones = lambda s, a, s2: np.ones(len(a))
    b0 = collect_rollouts(net, make_venv(2, 5), 50, np.random.default_rng(3), ones, beta=0.0)
    b1 = collect_rollouts(net, make_venv(2, 5), 50, np.random.default_rng(3), ones, beta=0.5)
    assert np.all(b0.intrinsic == 0)
    boot = b0.rewards - b0.task_rewards
    # only time-limit truncations carry a bootstrap term
    assert np.all(boot[b0.dones == 0] == 0)
    np.testing.assert_array_equal(b1.task_rewards, b0.task_rewards)
    np.testing.assert_allclose(b1.rewards - b0.rewards, 0.5, atol=1e-15)


def test_training_loop_is_deterministic():
    def run():
        schema = ThawingEnv().schema
        net = PolicyValueNet(schema, hidden=(16,), seed=4)
        cfg = PPOConfig(epochs=2, batch_size=16)
        adam = AdamState(lr=cfg.lr)
        venv = make_venv(2, 9)
        rng = np.random.default_rng(4)
        for _ in range(2):
            b = collect_rollouts(net, venv, 20, rng)
            ppo_update(net, b, cfg, adam, rng)
        return net.state_dict()

    a, b = run(), run()
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_env_failure_is_reported_with_context():
    class Broken(ThawingEnv):
        def step(self, action):
            raise KeyError("boom")

    net = PolicyValueNet(ThawingEnv().schema, hidden=(8,), seed=0)
    venv = VecEnv([Broken()], [0])
    with pytest.raises(RuntimeError, match="rollout step 0"):
        collect_rollouts(net, venv, 2, np.random.default_rng(0))
