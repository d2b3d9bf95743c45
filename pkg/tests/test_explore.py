from __future__ import annotations

import math

import numpy as np
import pytest

from elden.depgraph import extract_graph
from elden.dynamics import DynamicsConfig, make_batch, nll_loss, predict
from elden.envs import CarWashEnv, ThawingEnv, scripted_collect
from elden.explore import (
    DynamicsEnsemble,
    RewardConfig,
    RewardStats,
    cai_reward,
    combine,
    curiosity_reward,
    derive_seed,
    disagreement_reward,
    edge_variance,
    elden_reward,
    intrinsic_reward,
)

TINY = DynamicsConfig(hidden=(8,), heads=2, head_size=4, attn_out=8, post_attn=(8,), batch_size=32)


def make_ensemble(env, m=3, seed=0, identical=False, scale=0.7):
    ens = DynamicsEnsemble(env.schema, TINY, m=m, seed=seed)
    rng = np.random.default_rng(seed)
    for mod in ens.members:
        for name in ("out.w", "out.b"):
            mod.params[name].data[...] = rng.normal(0, scale, mod.params[name].shape)
    if identical:
        sd = ens.members[0].state_dict()
        for mod in ens.members[1:]:
            mod.load_state_dict(sd)
    return ens


def data(env, n=200, seed=0):
    d = scripted_collect(env, n, seed)
    return d.states, d.actions, d.next_states


def test_derive_seed_is_stable_and_path_sensitive():
    assert derive_seed(0, "env", 1) == derive_seed(0, "env", 1)
    assert len({derive_seed(0, "env", i) for i in range(50)}) == 50
    assert derive_seed(0, "a") != derive_seed(1, "a")
    assert 0 <= derive_seed(2**40, "x") < 2**63


def test_members_differ_only_by_initialization():
    ens = DynamicsEnsemble(ThawingEnv().schema, TINY, m=3, seed=0)
    w = [mod.params["feat.w0"].data for mod in ens.members]
    assert not np.array_equal(w[0], w[1])
    assert all(mod.config == TINY for mod in ens.members)
    # the members share one transition store but keep their own priorities
    assert ens.buffers[1].states is ens.buffers[0].states
    with pytest.raises(ValueError):
        DynamicsEnsemble(ThawingEnv().schema, TINY, m=0)


def test_identical_members_give_zero_elden_reward():
    env = ThawingEnv()
    ens = make_ensemble(env, m=5, identical=True)
    s, a, s2 = data(env)
    r = elden_reward(ens, s, a, s2)
    assert np.all(r == 0.0)
    # the shared member does produce edges, so the zero is not vacuous
    assert extract_graph(ens.members[0], s, a, s2).edges.any()


def test_edge_variance_hand_cases():
    n = 3
    g = np.zeros((5, 2, n + 1, n))
    g[:4, 0, 1, 2] = 1  # 4 of 5 members see edge (1 -> 2) on transition 0
    g[:, 1, :, :] = 1  # every member agrees on every edge of transition 1
    r = edge_variance(g)
    assert abs(r[0] - 0.16 / ((n + 1) * n)) <= 1e-12
    assert r[1] == 0.0
    # largest Bernoulli variance for M=5 is a 3-2 split: 0.24
    g2 = np.zeros((5, 1, 1, 1))
    g2[:3] = 1
    assert abs(edge_variance(g2)[0] - 0.24) <= 1e-12


def test_elden_reward_is_bounded_and_nonzero_for_random_members():
    env = ThawingEnv()
    ens = make_ensemble(env, m=5, scale=2.0)
    s, a, s2 = data(env)
    r = elden_reward(ens, s, a, s2, eps=1e-2)
    assert r.shape == (200,) and np.all(r >= 0) and np.all(r <= 0.25)
    assert r.max() > 0


def test_disagreement_matches_manual_variance():
    env = ThawingEnv()
    ens = make_ensemble(env, m=3)
    s, a, _ = data(env, 50)
    preds = np.stack([np.concatenate(predict(m, s, a), axis=1) for m in ens.members])
    np.testing.assert_allclose(disagreement_reward(ens, s, a), preds.var(axis=0).mean(axis=1), atol=1e-15)
    same = make_ensemble(env, m=3, identical=True)
    # the mean of identical floats can round, so allow float noise
    assert np.all(disagreement_reward(same, s, a) <= 1e-30)


def test_curiosity_is_mean_member_nll():
    env = ThawingEnv()
    ens = make_ensemble(env, m=2)
    s, a, s2 = data(env, 40)
    r = curiosity_reward(ens, s, a, s2)
    batch = make_batch(env.schema, s, a, s2)
    per_member = [nll_loss(m, batch).loss.item() for m in ens.members]
    assert r.mean() == pytest.approx(np.mean(per_member), rel=1e-10)


def test_curiosity_of_untrained_ensemble_is_uniform_code_length():
    env = CarWashEnv()
    ens = DynamicsEnsemble(env.schema, TINY, m=2, seed=0)
    s, a, s2 = data(env, 20)
    expect = sum(math.log(f.size) for f in env.schema.factors)
    np.testing.assert_allclose(curiosity_reward(ens, s, a, s2), expect, rtol=1e-12)


def test_cai_counts_action_edges_and_shrinks_with_eps():
    env = ThawingEnv()
    ens = make_ensemble(env, m=2, scale=2.0)
    s, a, s2 = data(env, 60)
    prev = None
    for eps in (1e-4, 1e-3, 1e-2, 1e-1, 10.0):
        r = cai_reward(ens, s, a, s2, eps)
        assert np.all((r >= 0) & (r <= env.schema.n))
        if prev is not None:
            assert np.all(r <= prev)
        prev = r
    assert np.all(prev == 0)


def test_combine_and_zero_beta():
    assert combine([1.0, 0.0], [0.5, 2.0], 0.0).tolist() == [1.0, 0.0]
    assert combine([1.0, 0.0], [0.5, 2.0], 2.0).tolist() == [2.0, 4.0]


def test_intrinsic_dispatch():
    env = ThawingEnv()
    ens = make_ensemble(env, m=2)
    s, a, s2 = data(env, 30)
    assert np.all(intrinsic_reward(None, RewardConfig("elden"), s, a, s2) == 0)
    assert np.all(intrinsic_reward(ens, RewardConfig("none"), s, a, s2) == 0)
    np.testing.assert_array_equal(intrinsic_reward(ens, RewardConfig("disagreement"), s, a, s2),
                                  disagreement_reward(ens, s, a))
    np.testing.assert_array_equal(intrinsic_reward(ens, RewardConfig("cai", eps=1e-3), s, a, s2),
                                  cai_reward(ens, s, a, s2, 1e-3))
    with pytest.raises(ValueError):
        RewardConfig("bonus")
    with pytest.raises(ValueError):
        RewardConfig(beta=-1)


def test_ensemble_training_is_independent_per_member():
    env = ThawingEnv()
    ens = DynamicsEnsemble(env.schema, TINY, m=2, seed=3)
    s, a, s2 = data(env, 100)
    ens.add(s, a, s2)
    infos = ens.train(3)
    assert len(infos) == 2 and all("nll" in i for i in infos)
    assert not np.array_equal(ens.members[0].params["out.w"].data, ens.members[1].params["out.w"].data)


def test_reward_stats():
    st = RewardStats.of(np.array([0.0, 0.0, 0.5, 1.5]))
    assert (st.mean, st.max, st.frac_zero) == (0.5, 1.5, 0.5)
    assert RewardStats.of(np.zeros(0)).frac_zero == 1.0
