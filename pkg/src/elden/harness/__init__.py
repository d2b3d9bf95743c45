"""Experiment orchestration: configuration, detection runs, the RL loop and the CLI."""

from .config import ConfigError, RunConfig, dump, env_defaults, load, parse_text
from .rl import RunAborted, run_seeds, train_rl
from .runs import build_env, collect, detection_run, eval_deps, train_dynamics

__all__ = [
    "ConfigError",
    "RunAborted",
    "RunConfig",
    "build_env",
    "collect",
    "detection_run",
    "dump",
    "env_defaults",
    "eval_deps",
    "load",
    "parse_text",
    "run_seeds",
    "train_dynamics",
    "train_rl",
]
