"""Acceptance checks, one test per criterion, tolerances pinned below.

Criteria 4 and 8 need many CPU hours. By default their tests time the real
training step on this machine, project the full experiment and fail when the
projection exceeds the allowed runtime. ``ELDEN_FULL_ACCEPTANCE=1`` runs the
full experiments instead and checks the stated thresholds.
"""

from __future__ import annotations

import math
import os
import time

import numpy as np
import pytest

from elden.depgraph import EldenDetector, PCMIDetector, best_f1, evaluate_detection, rollout_episodes, roc_auc
from elden.dynamics import DynamicsModel, PrioritizedBuffer, Trainer, train_step
from elden.envs import make_env, scripted_collect
from elden.explore import DynamicsEnsemble, edge_variance, elden_reward
from elden.harness import config as C
from elden.harness.rl import ensemble_config, run_seeds, train_rl
from elden.harness.runs import collect, detection_run
from elden.ppo import PolicyValueNet, PPOConfig, RolloutBatch, encode_state, gae, ppo_update
from elden.tensorcore import AdamState, Tensor, finite_difference, grad, jacobian_l1, second_order_grad, sum_

from _util import SmallNet, brute_auc, brute_best_f1, rel_err

pytestmark = pytest.mark.acceptance

FULL = os.environ.get("ELDEN_FULL_ACCEPTANCE") == "1"

# criterion 1
GRAD_NETS = 100
GRAD_TOL = 1e-6
PENALTY_GRAD_TOL = 1e-4
GRAD_LIMIT_S = 120
# criterion 2
METRIC_INSTANCES = 200
METRIC_TOL = 1e-12
METRIC_LIMIT_S = 10
# criterion 3
SYN_SEEDS = (0, 1, 2)
SYN_AUC = 0.95
SYN_LIMIT_S = 600
# criterion 4
C4_SEEDS = (0, 1, 2)
C4_GRID = 8
C4_TRANSITIONS = 100_000
C4_BATCHES = 50_000
C4_MARGIN_LAMBDA0 = 0.05
C4_MARGIN_NOREG = 0.10
C4_AUC = 0.60
C4_LIMIT_S = 3600
# criterion 5
BUT_FOR_TRANSITIONS = 1000
BUT_FOR_LIMIT_S = 300
# criterion 6
IDENTICAL_M = 5
IDENTICAL_TRANSITIONS = 1000
VARIANCE_TOL = 1e-12
REWARD_LIMIT_S = 60
# criterion 8
RL_SEEDS = (0, 1, 2)
RL_STEPS = 500_000
RL_THAWING_STAGE = 0.9
RL_CARWASH_MARGIN = 0.2
RL_LIMIT_S = 4 * 3600
# criterion 9
BANDIT_UPDATES = 200
BANDIT_P = 0.95
GAE_TOL = 1e-12


def _timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


# -- 1 -------------------------------------------------------------------------------------


def test_c1_gradients_match_finite_differences():
    def run():
        worst_first, worst_pen = 0.0, 0.0
        for k in range(GRAD_NETS):
            rng = np.random.default_rng(1000 + k)
            net = SmallNet(rng)
            x = rng.normal(size=(3, net.d_in))
            w = rng.normal(size=(3, net.n_out))
            params = list(net.params.values())
            xt = Tensor(x.copy(), requires_grad=True)
            gs = grad(sum_(net(xt) * Tensor(w)), params + [xt])
            f = lambda: float(np.sum(net(Tensor(x)).data * w))
            for p, g in zip(params, gs[:-1]):
                worst_first = max(worst_first, rel_err(g.data, finite_difference(f, p.data, 1e-6)))
            worst_first = max(worst_first, rel_err(gs[-1].data, finite_difference(f, x, 1e-6)))
            _, pg = second_order_grad(net, x, params)
            for p, g in zip(params, pg):
                fd = finite_difference(lambda: jacobian_l1(net, Tensor(x, requires_grad=True)).item(), p.data, 1e-6)
                worst_pen = max(worst_pen, rel_err(g, fd))
        return worst_first, worst_pen

    (worst_first, worst_pen), secs = _timed(run)
    print(f"c1: worst first-order rel err {worst_first:.3e}, worst penalty rel err {worst_pen:.3e}, {secs:.1f}s")
    assert worst_first <= GRAD_TOL
    assert worst_pen <= PENALTY_GRAD_TOL
    assert secs < GRAD_LIMIT_S


# -- 2 -------------------------------------------------------------------------------------


def test_c2_metrics_match_brute_force_oracles():
    rng = np.random.default_rng(2)
    instances = []
    for _ in range(METRIC_INSTANCES):
        n = int(rng.integers(2, 200))
        if rng.random() < 0.5:
            s = rng.integers(0, int(rng.integers(2, 10)), n).astype(float)
        else:
            s = rng.normal(size=n)
        y = rng.random(n) < rng.uniform(0.05, 0.95)
        if y.all() or not y.any():
            y[0] = not y[0]
        instances.append((s, y))

    def run():
        worst = 0.0
        for s, y in instances:
            worst = max(worst, abs(roc_auc(s, y) - brute_auc(s, y)), abs(best_f1(s, y) - brute_best_f1(s, y)))
        return worst

    worst, secs = _timed(run)
    print(f"c2: worst |delta| {worst:.3e} over {METRIC_INSTANCES} instances, {secs:.2f}s")
    assert worst <= METRIC_TOL
    assert secs < METRIC_LIMIT_S


# -- 3 -------------------------------------------------------------------------------------


def test_c3_synthetic_detection_oracle():
    cfg = C.env_defaults("synthetic", "elden")
    assert (cfg.env_cfg.n, cfg.env_cfg.sparsity, cfg.collect.n, cfg.train.batches) == (10, 0.3, 20_000, 20_000)

    def run():
        return [detection_run(cfg, s)["roc_auc"] for s in SYN_SEEDS]

    aucs, secs = _timed(run)
    mean = float(np.mean(aucs))
    print(f"c3: synthetic ROC-AUC per seed {aucs}, mean {mean:.4f}, {secs:.0f}s")
    assert mean >= SYN_AUC
    assert secs < SYN_LIMIT_S


# -- 4 -------------------------------------------------------------------------------------

C4_ARMS = {
    "mixup_lam1e-2": dict(mixup=True, lam=1e-2),
    "mixup_lam0": dict(mixup=True, lam=0.0),
    "nomix_noreg": dict(mixup=False, lam=0.0),
}


def c4_config(arm: str) -> C.RunConfig:
    cfg = C.env_defaults("thawing", "elden")
    cfg.env_cfg.grid_size = C4_GRID
    cfg.collect.n = C4_TRANSITIONS
    cfg.train.batches = C4_BATCHES
    for k, v in C4_ARMS[arm].items():
        setattr(cfg.dynamics, k, v)
    return cfg


def step_seconds(cfg, buffer, batch_index, steps=20) -> float:
    tr = Trainer(DynamicsModel(buffer.schema, cfg, 0), cfg, np.random.default_rng(0))
    train_step(tr, buffer, batch_index)  # warm-up
    t = time.perf_counter()
    for _ in range(steps):
        train_step(tr, buffer, batch_index)
    return (time.perf_counter() - t) / steps


def project_c4() -> tuple[float, str]:
    cfg = c4_config("mixup_lam1e-2")
    small = C.copy_config(cfg)
    small.collect.n = 5000
    data, t_collect = _timed(lambda: collect(small, 0))
    buf = PrioritizedBuffer(data.schema, len(data), cfg.dynamics.priority_exponent)
    buf.add(data.states, data.actions, data.next_states)
    t_pen = step_seconds(cfg.dynamics, buf, cfg.dynamics.anneal_end)
    t_nll = step_seconds(cfg.dynamics, buf, 0)
    plain = c4_config("nomix_noreg").dynamics
    t_plain = step_seconds(plain, buf, 0)
    d = cfg.dynamics
    reg_arm = d.anneal_start * t_nll + (C4_BATCHES - d.anneal_start) * t_pen
    per_seed = t_collect * C4_TRANSITIONS / 5000 + reg_arm + C4_BATCHES * (t_nll + t_plain)
    total = per_seed * len(C4_SEEDS)
    detail = (f"penalty step {t_pen * 1e3:.1f} ms, nll step {t_nll * 1e3:.1f} ms, plain step {t_plain * 1e3:.1f} ms; "
              f"projected {total / 3600:.2f} h for 3 arms x {len(C4_SEEDS)} seeds (evaluation excluded)")
    return total, detail


def test_c4_directional_regularization_ablation():
    if not FULL:
        total, detail = project_c4()
        print("c4:", detail)
        assert total < C4_LIMIT_S, f"full-scale run cannot meet the runtime limit: {detail}"
        pytest.skip("projection fits; set ELDEN_FULL_ACCEPTANCE=1 for the full run")

    def run():
        res = {arm: [] for arm in C4_ARMS}
        for seed in C4_SEEDS:
            data = collect(c4_config("mixup_lam1e-2"), seed)
            for arm in C4_ARMS:
                res[arm].append(detection_run(c4_config(arm), seed, None, data)["roc_auc"])
        return {arm: float(np.mean(v)) for arm, v in res.items()}

    auc, secs = _timed(run)
    print(f"c4: mean ROC-AUC {auc}, {secs / 3600:.2f} h")
    assert auc["mixup_lam1e-2"] - auc["mixup_lam0"] >= C4_MARGIN_LAMBDA0
    assert auc["mixup_lam1e-2"] - auc["nomix_noreg"] >= C4_MARGIN_NOREG
    assert auc["mixup_lam1e-2"] >= C4_AUC
    assert secs < C4_LIMIT_S


# -- 5 -------------------------------------------------------------------------------------


def but_for_violations(env, state, action) -> int:
    base_next, graph = env.transition(state, action)
    bad = 0
    for i, f in enumerate(env.schema.factors):
        for v in range(f.size):
            if v == state[i]:
                continue
            alt = state.copy()
            alt[i] = v
            nxt, _ = env.transition(alt, action)
            changed = nxt != base_next
            bad += int(np.sum(changed & ~graph[i]))
    return bad


def test_c5_ground_truth_graphs_survive_but_for_replay():
    def run():
        out = {}
        for name in ("thawing", "carwash", "minecraft"):
            env = make_env(name)
            d = scripted_collect(env, BUT_FOR_TRANSITIONS, seed=55)
            out[name] = sum(but_for_violations(env, s, int(a)) for s, a in zip(d.states, d.actions))
        return out

    violations, secs = _timed(run)
    print(f"c5: violations {violations}, {secs:.1f}s")
    assert all(v == 0 for v in violations.values())
    assert secs < BUT_FOR_LIMIT_S


# -- 6 -------------------------------------------------------------------------------------


def test_c6_intrinsic_reward_invariants():
    def run():
        env = make_env("thawing")
        ens = DynamicsEnsemble(env.schema, m=IDENTICAL_M, seed=6)
        rng = np.random.default_rng(6)
        first = ens.members[0]
        for name in ("out.w", "out.b"):
            first.params[name].data[...] = rng.normal(0, 0.5, first.params[name].shape)
        for mod in ens.members[1:]:
            mod.load_state_dict(first.state_dict())
        d = scripted_collect(env, IDENTICAL_TRANSITIONS, seed=6)
        r = elden_reward(ens, d.states, d.actions, d.next_states)
        n = env.schema.n
        g = np.zeros((5, 1, n + 1, n))
        g[:4, 0, 2, 3] = 1
        split = edge_variance(g)[0] * (n + 1) * n
        g1 = np.zeros((5, 1, 1, 1))
        g1[:4] = 1
        return r, split, edge_variance(g1)[0]

    (r, split, single), secs = _timed(run)
    print(f"c6: max reward {r.max()}, 4-of-5 split {split!r} / {single!r}, {secs:.1f}s")
    assert np.all(r == 0.0)
    assert abs(split - 0.16) <= VARIANCE_TOL and abs(single - 0.16) <= VARIANCE_TOL
    assert secs < REWARD_LIMIT_S


# -- 7 -------------------------------------------------------------------------------------


def test_c7_pass_counts():
    env = make_env("thawing")
    model = DynamicsModel(env.schema, seed=0)
    s, a, s2, g = rollout_episodes(env, 2, seed=7)
    b, n = len(a), env.schema.n
    elden = EldenDetector(model)
    pcmi = PCMIDetector(model)
    m_e = evaluate_detection(elden, env, data=(s, a, s2, g))
    m_p = evaluate_detection(pcmi, env, data=(s, a, s2, g))
    print(f"c7: B={b} N={n}: elden {m_e.forward_passes} fwd / {m_e.backward_passes} bwd, "
          f"pcmi {m_p.forward_passes} fwd / {m_p.backward_passes} bwd")
    assert (m_e.forward_passes, m_e.backward_passes) == (b, n * b)
    assert (m_p.forward_passes, m_p.backward_passes) == ((n + 2) * b, 0)


# -- 8 -------------------------------------------------------------------------------------


def rl_config(env: str, method: str) -> C.RunConfig:
    cfg = C.env_defaults(env, method)
    cfg.steps = RL_STEPS
    cfg.seeds = RL_SEEDS
    if env == "thawing":
        cfg.env_cfg.grid_size = 8
    return cfg


def project_rl(env: str, method: str) -> float:
    """Lower bound on one seed's wall time: dynamics updates after the anneal plus rewards and PPO."""
    cfg = rl_config(env, method)
    pc = cfg.ppo
    iterations = math.ceil(cfg.steps / (pc.n_envs * pc.n_steps))
    small = C.copy_config(cfg)
    small.collect.n = 2000
    data = collect(small, 0)
    # rewards and PPO for one iteration's worth of transitions
    n_iter = pc.n_envs * pc.n_steps
    idx = np.arange(n_iter) % len(data)
    t_dyn = 0.0
    t_rew = 0.0
    if cfg.reward.kind != "none":
        dcfg = ensemble_config(cfg)
        buf = PrioritizedBuffer(data.schema, len(data), dcfg.priority_exponent)
        buf.add(data.states, data.actions, data.next_states)
        t_pen = step_seconds(dcfg, buf, dcfg.anneal_end, steps=10)
        t_nll = step_seconds(dcfg, buf, 0, steps=10)
        per_member = iterations * (cfg.rl.dynamics_updates or pc.n_steps)
        pen_steps = max(0, per_member - dcfg.anneal_start)
        t_dyn = cfg.rl.ensemble_size * (min(per_member, dcfg.anneal_start) * t_nll + pen_steps * t_pen)
        ens = DynamicsEnsemble(data.schema, dcfg, cfg.rl.ensemble_size, 0)
        sub = idx[:200]
        _, t = _timed(lambda: elden_reward(ens, data.states[sub], data.actions[sub], data.next_states[sub]))
        t_rew = iterations * t * n_iter / len(sub)
    net = PolicyValueNet(data.schema, pc.hidden, 0)
    sub = idx[:600]
    m = len(sub)
    st = data.states[sub].reshape(m, 1, -1)
    z = np.zeros((m, 1))
    batch = RolloutBatch(st, data.actions[sub].reshape(m, 1), z, z, z, z, z, z, st, np.zeros(1))
    _, t = _timed(lambda: ppo_update(net, batch, pc, AdamState(lr=pc.lr), np.random.default_rng(0)))
    t_ppo = iterations * t * n_iter / m
    return t_dyn + t_rew + t_ppo


def test_c8_directional_rl_result():
    runs = [("thawing", "elden"), ("carwash", "elden"), ("carwash", "vanilla"), ("carwash", "disagreement")]
    if not FULL:
        per_seed = {r: project_rl(*r) for r in runs}
        total = sum(per_seed.values()) * len(RL_SEEDS)
        detail = ", ".join(f"{e}/{m} {t / 3600:.2f} h" for (e, m), t in per_seed.items())
        print(f"c8: projected per-seed lower bounds: {detail}; total {total / 3600:.1f} h")
        assert total < RL_LIMIT_S, f"full-scale runs cannot meet the runtime limit: total {total / 3600:.1f} h"
        pytest.skip("projection fits; set ELDEN_FULL_ACCEPTANCE=1 for the full run")

    import tempfile

    def run():
        res = {}
        with tempfile.TemporaryDirectory() as tmp:
            for env, method in runs:
                res[(env, method)] = run_seeds(rl_config(env, method), f"{tmp}/{env}_{method}")["final_stage_mean"]
        return res

    res, secs = _timed(run)
    print(f"c8: final mean normalized stage {res}, {secs / 3600:.2f} h")
    assert res[("thawing", "elden")] >= RL_THAWING_STAGE
    assert res[("carwash", "elden")] - res[("carwash", "vanilla")] >= RL_CARWASH_MARGIN
    assert res[("carwash", "elden")] - res[("carwash", "disagreement")] >= RL_CARWASH_MARGIN
    assert secs < RL_LIMIT_S


# -- 9 -------------------------------------------------------------------------------------


def test_c9_ppo_sanity():
    from elden.schema import Factor, FactorSchema

    schema = FactorSchema((Factor("a", "cat", 2), Factor("b", "cat", 2)), n_actions=2)
    net = PolicyValueNet(schema, seed=0)
    cfg = PPOConfig()
    adam = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(0)
    x0 = encode_state(schema, np.zeros((1, 2)))
    p = 0.0
    used = 0
    for used in range(1, BANDIT_UPDATES + 1):
        s = np.zeros((64, 1, 2))
        a, lp, v = net.act(encode_state(schema, s.reshape(64, 2)), rng)
        r = (a == 0).astype(float)[:, None]
        batch = RolloutBatch(s, a[:, None], lp[:, None], v[:, None], r, np.zeros((64, 1)), r, np.ones((64, 1)),
                             s, np.zeros(1))
        ppo_update(net, batch, cfg, adam, rng)
        p = float(np.exp(net.log_prob(x0, [0]))[0])
        if p >= BANDIT_P:
            break
    z = np.zeros((3, 1))
    hand = RolloutBatch(z, z.astype(int), z, z, np.array([[0.0], [0.0], [1.0]]), z,
                        np.array([[0.0], [0.0], [1.0]]), np.array([[0.0], [0.0], [1.0]]), z, np.zeros(1))
    adv, _ = gae(hand, 0.99, 0.98)
    # rewards (0, 0, 1), zero values, terminal at the third step: A_0 = (gamma lambda)^2
    derived = (0.99 * 0.98) ** 2
    print(f"c9: bandit p={p:.4f} after {used} updates; GAE A_0={adv[0, 0]!r} vs {derived!r}")
    assert p >= BANDIT_P
    assert abs(adv[0, 0] - derived) <= GAE_TOL


# -- 10 ------------------------------------------------------------------------------------


def test_c10_repeated_runs_give_identical_csv(tmp_path):
    from elden.harness.cli import main

    small_model = ["dynamics.hidden=16", "dynamics.heads=2", "dynamics.head_size=8", "dynamics.attn_out=16",
                   "dynamics.post_attn=16", "dynamics.anneal_start=10", "dynamics.anneal_end=20",
                   "train.batches=40", "train.log_every=5", "eval.episodes=3", "env.grid_size=6"]
    small_rl = small_model + ["ppo.n_envs=4", "ppo.n_steps=30", "ppo.hidden=32", "rl.ensemble_size=3",
                              "rl.dynamics_updates=20", "rl.dynamics_lr=0.01", "steps=480"]

    def pipeline(name):
        root = tmp_path / name
        deps = sum((["--set", s] for s in small_model), [])
        rl = sum((["--set", s] for s in small_rl), [])
        assert main(["collect", "-n", "1500", "--seed", "2", "--out", f"{root}/data", *deps]) == 0
        assert main(["train-dynamics", "--data", f"{root}/data/thawing_seed2.data", "--seed", "2",
                     "--out", f"{root}/model", *deps]) == 0
        assert main(["eval-deps", "--checkpoint", f"{root}/model/model_elden_seed2.ckpt",
                     "--out", f"{root}/eval"]) == 0
        assert main(["train-rl", "--method", "elden", "--seed", "2", "--out", f"{root}/rl", *rl]) == 0
        return {p: (root / p).read_bytes() for p in
                ("model/dynamics_elden_seed2.csv", "eval/detection.csv", "rl/rl_seed2.csv")}

    a, b = pipeline("a"), pipeline("b")
    for k in a:
        assert a[k] == b[k], k
    print("c10: byte-identical", sorted(a))
