"""On-policy training loop: collect, reward with the frozen ensemble, PPO update, then train the ensemble."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from ..explore import DynamicsEnsemble, RewardStats, derive_seed, intrinsic_reward
from ..ppo import PolicyValueNet, VecEnv, collect_rollouts, gae, ppo_update
from ..tensorcore import AdamState
from .config import RL_METHODS, ConfigError, RunConfig, dump
from .runs import build_env, env_seed

log = logging.getLogger(__name__)

RL_FIELDS = (
    "iteration",
    "env_steps",
    "episodes",
    "mean_task_reward",
    "success_rate",
    "stage_mean",
    "stage_std",
    "intrinsic_mean",
    "intrinsic_max",
    "intrinsic_frac_zero",
    "policy_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "clip_frac",
    "dynamics_nll",
)

# the final score of a run averages episodes over this many trailing iterations
FINAL_WINDOW = 5


class RunAborted(RuntimeError):
    """A module error stopped the run; the partial CSV and summary are on disk."""


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def ensemble_config(cfg: RunConfig):
    # prediction-based rewards never read the Jacobian, so their models skip the penalty
    lam = cfg.dynamics.lam if cfg.reward.kind in ("elden", "cai") else 0.0
    return dataclasses.replace(
        cfg.dynamics,
        lr=cfg.rl.dynamics_lr,
        mixup_alpha=cfg.rl.mixup_alpha,
        priority_exponent=cfg.rl.priority_exponent,
        lam=lam,
    )


def train_rl(cfg: RunConfig, seed: int, out_dir: str | Path, env_factory=None) -> dict:
    """Run one seed to the step budget; writes ``rl_seed{seed}.csv`` and ``.json`` under ``out_dir``.

    ``env_factory(i)`` may replace the configured environments (tests use it
    to alter stage definitions); it must return a fresh environment.
    """
    if cfg.method not in RL_METHODS:
        raise ConfigError(f"method: train-rl needs one of {RL_METHODS}, got {cfg.method!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"rl_seed{seed}.csv"
    json_path = out_dir / f"rl_seed{seed}.json"

    pc = cfg.ppo
    def make(i):
        if env_factory is not None:
            return env_factory(i)
        return build_env(cfg, env_seed(cfg, seed) if cfg.env == "synthetic" else derive_seed(seed, "env", i))

    envs = [make(i) for i in range(pc.n_envs)]
    schema = envs[0].schema
    venv = VecEnv(envs, [derive_seed(seed, "env", i) for i in range(pc.n_envs)])
    net = PolicyValueNet(schema, pc.hidden, derive_seed(seed, "policy"))
    adam = AdamState(lr=pc.lr)
    act_rng = np.random.default_rng(derive_seed(seed, "act"))
    shuffle_rng = np.random.default_rng(derive_seed(seed, "shuffle"))

    use_model = cfg.reward.kind != "none" and cfg.reward.beta > 0
    ensemble = None
    if use_model:
        ensemble = DynamicsEnsemble(schema, ensemble_config(cfg), cfg.rl.ensemble_size,
                                    derive_seed(seed, "ensemble"))
    updates = cfg.rl.dynamics_updates or pc.n_steps
    per_iter = pc.n_envs * pc.n_steps
    iterations = max(1, math.ceil(cfg.steps / per_iter))

    def reward_fn(s, a, s2):
        return intrinsic_reward(ensemble, cfg.reward, s, a, s2)

    history: list[list[tuple[float, bool, float]]] = []
    summary = {"env": cfg.env, "method": cfg.method, "seed": seed, "iterations": 0, "env_steps": 0,
               "status": "running"}
    started = time.perf_counter()
    ppo_skipped = 0
    fh = open(csv_path, "w", newline="")
    try:
        w = csv.writer(fh)
        w.writerow(RL_FIELDS)
        fh.flush()
        for it in range(iterations):
            batch = collect_rollouts(net, venv, pc.n_steps, act_rng, reward_fn if use_model else None,
                                     cfg.reward.beta, pc.gamma)
            gae(batch, pc.gamma, pc.gae_lambda)
            stats = ppo_update(net, batch, pc, adam, shuffle_rng)
            ppo_skipped += stats.skipped
            nll = math.nan
            if ensemble is not None:
                n = len(batch)
                ensemble.add(batch.states.reshape(n, -1), batch.actions.reshape(n),
                             batch.next_states.reshape(n, -1))
                infos = ensemble.train(updates)
                nll = float(np.mean([i["nll"] for i in infos]))
            eps = batch.episodes
            history.append(eps)
            stages = np.array([e[2] for e in eps])
            r = RewardStats.of(batch.intrinsic)
            row = {
                "iteration": it,
                "env_steps": (it + 1) * per_iter,
                "episodes": len(eps),
                "mean_task_reward": float(np.mean([e[0] for e in eps])) if eps else math.nan,
                "success_rate": float(np.mean([e[1] for e in eps])) if eps else math.nan,
                "stage_mean": float(stages.mean()) if eps else math.nan,
                "stage_std": float(stages.std()) if eps else math.nan,
                "intrinsic_mean": r.mean,
                "intrinsic_max": r.max,
                "intrinsic_frac_zero": r.frac_zero,
                "policy_loss": stats.policy_loss,
                "value_loss": stats.value_loss,
                "entropy": stats.entropy,
                "approx_kl": stats.approx_kl,
                "clip_frac": stats.clip_frac,
                "dynamics_nll": nll,
            }
            w.writerow([_cell(row[k]) for k in RL_FIELDS])
            fh.flush()
            summary["iterations"] = it + 1
            summary["env_steps"] = (it + 1) * per_iter
        summary["status"] = "ok"
    except Exception as exc:
        summary["status"] = "aborted"
        summary["error"] = f"{type(exc).__name__}: {exc}"
        raise RunAborted(f"train-rl aborted at iteration {summary['iterations']}: {exc}") from exc
    finally:
        fh.close()
        tail = [e for eps in history[-FINAL_WINDOW:] for e in eps]
        summary["final_stage"] = float(np.mean([e[2] for e in tail])) if tail else math.nan
        summary["final_success_rate"] = float(np.mean([e[1] for e in tail])) if tail else math.nan
        summary["wall_time_s"] = time.perf_counter() - started
        summary["incidents"] = {
            "flagged_transitions": ensemble.incidents.flagged if ensemble else 0,
            "clamped_likelihoods": (ensemble.incidents.clamped + sum(t.clamped for t in ensemble.trainers))
            if ensemble else 0,
            "dynamics_steps_skipped": sum(t.skipped for t in ensemble.trainers) if ensemble else 0,
            "ppo_steps_skipped": ppo_skipped,
        }
        json_path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def aggregate(summaries: list[dict]) -> dict:
    """Mean and population std across seeds of the final stage and success rate."""
    out = {"seeds": [s["seed"] for s in summaries]}
    for key in ("final_stage", "final_success_rate"):
        vals = np.array([s[key] for s in summaries], dtype=np.float64)
        out[f"{key}_mean"] = float(vals.mean()) if len(vals) else math.nan
        out[f"{key}_std"] = float(vals.std()) if len(vals) else math.nan
    return out


def run_seeds(cfg: RunConfig, out_dir: str | Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(dump(cfg))
    summaries = [train_rl(cfg, s, out_dir) for s in cfg.seeds]
    agg = {"env": cfg.env, "method": cfg.method, **aggregate(summaries)}
    (out_dir / "summary.json").write_text(json.dumps(agg, indent=1, sort_keys=True))
    return agg
