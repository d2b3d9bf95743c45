"""Dependency-detection experiments: collect, train a detector's model, score fresh episodes."""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from ..depgraph import (
    AttnDetector,
    DetectionMetrics,
    EldenDetector,
    PCMIDetector,
    evaluate_detection,
    metrics_row,
)
from ..dynamics import DynamicsModel, PrioritizedBuffer, Trainer, fit
from ..envs import Dataset, FactoredEnv, make_env, scripted_collect
from ..explore import derive_seed
from .config import DETECTION_METHODS, ConfigError, RunConfig

log = logging.getLogger(__name__)


def build_env(cfg: RunConfig, seed: int | None = None) -> FactoredEnv:
    e = cfg.env_cfg
    if cfg.env == "synthetic":
        # the seed fixes the generator's weights, i.e. the ground-truth mask
        kw = dict(n=e.n, sparsity=e.sparsity, noise=e.noise, seed=seed)
    else:
        kw = dict(grid_size=e.grid_size, reject_blocked=e.reject_blocked, seed=seed)
    if e.episode_length > 0:
        kw["episode_length"] = e.episode_length
    try:
        return make_env(cfg.env, **kw)
    except ValueError as exc:
        raise ConfigError(f"env: {exc}") from None


def env_seed(cfg: RunConfig, seed: int) -> int | None:
    # the synthetic generator must be the same object at collection and evaluation time
    return derive_seed(seed, "synthetic") if cfg.env == "synthetic" else None


def collect(cfg: RunConfig, seed: int) -> Dataset:
    env = build_env(cfg, env_seed(cfg, seed))
    data = scripted_collect(env, cfg.collect.n, derive_seed(seed, "collect"), cfg.collect.epsilon)
    data.meta.update(grid_size=cfg.env_cfg.grid_size, master_seed=seed)
    return data


def buffer_from(data: Dataset, cfg: RunConfig) -> PrioritizedBuffer:
    buf = PrioritizedBuffer(data.schema, max(cfg.dynamics.capacity, len(data)), cfg.dynamics.priority_exponent)
    buf.add(data.states, data.actions, data.next_states)
    return buf


def check_schema(data: Dataset, env: FactoredEnv) -> None:
    if data.schema != env.schema:
        raise ConfigError(
            f"dataset schema ({data.meta.get('env', '?')}, {data.schema.n} factors) does not match "
            f"environment {env.name!r} ({env.schema.n} factors); check --env and env.grid_size"
        )


def train_dynamics(cfg: RunConfig, data: Dataset, seed: int, curve_csv: str | Path | None = None):
    """Train the model behind ``cfg.method``; returns (model, logged curve rows)."""
    if cfg.method not in DETECTION_METHODS:
        raise ConfigError(f"method: train-dynamics needs one of {DETECTION_METHODS}, got {cfg.method!r}")
    check_schema(data, build_env(cfg, env_seed(cfg, seed)))
    model = DynamicsModel(data.schema, cfg.dynamics, derive_seed(seed, "model"))
    trainer = Trainer(model, cfg.dynamics, np.random.default_rng(derive_seed(seed, "sampler")))
    rows = fit(trainer, buffer_from(data, cfg), cfg.train.batches, curve_csv, cfg.train.log_every)
    if trainer.skipped:
        log.warning("train-dynamics: %d steps skipped on non-finite values", trainer.skipped)
    return model, rows


def make_detector(method: str, model: DynamicsModel, eps: float):
    if method == "elden":
        return EldenDetector(model, eps)
    if method == "pcmi":
        return PCMIDetector(model)
    if method == "attn":
        return AttnDetector(model)
    raise ConfigError(f"method: no detector named {method!r}")


def eval_deps(cfg: RunConfig, model: DynamicsModel, method: str, seed: int) -> DetectionMetrics:
    env = build_env(cfg, env_seed(cfg, seed))
    if model.schema != env.schema:
        raise ConfigError(f"checkpoint schema does not match environment {env.name!r}")
    det = make_detector(method, model, cfg.reward.eps)
    # evaluation episodes come from a seed stream disjoint from collection
    return evaluate_detection(det, env, cfg.eval.episodes, derive_seed(seed, "eval", cfg.eval.seed_offset))


def detection_run(cfg: RunConfig, seed: int, out_dir: str | Path | None = None,
                  data: Dataset | None = None) -> dict:
    """Collect (unless given), train and evaluate one detector; returns a report row."""
    if data is None:
        data = collect(cfg, seed)
    curve = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        curve = out_dir / f"dynamics_{cfg.method}_seed{seed}.csv"
    model, _ = train_dynamics(cfg, data, seed, curve)
    metrics = eval_deps(cfg, model, cfg.method, seed)
    row = metrics_row(cfg.method, cfg.env, seed, metrics)
    if out_dir is not None:
        (out_dir / f"detection_{cfg.method}_seed{seed}.json").write_text(
            json.dumps(row, indent=1, sort_keys=True, default=_plain)
        )
    return row


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(type(o))
