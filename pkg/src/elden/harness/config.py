"""Run configuration as flat ``dotted.key=value`` text.

Every key has a typed default; parsing rejects unknown keys and values that
do not fit the key's type. ``dump`` writes every key, so a dumped file
re-parses to an equal config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..dynamics import DynamicsConfig
from ..explore import RewardConfig
from ..ppo import PPOConfig

ENV_NAMES = ("thawing", "carwash", "minecraft", "synthetic")
RL_METHODS = ("elden", "disagreement", "curiosity", "cai", "vanilla")
DETECTION_METHODS = ("elden", "pcmi", "attn")


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    grid_size: int = 10
    episode_length: int = 0  # 0 keeps the environment's own default
    reject_blocked: bool = True
    # synthetic environment only
    n: int = 10
    sparsity: float = 0.3
    noise: float = 0.1


@dataclass
class CollectConfig:
    n: int = 100_000
    epsilon: float = 0.5


@dataclass
class TrainConfig:
    batches: int = 50_000
    log_every: int = 100


@dataclass
class EvalConfig:
    episodes: int = 50
    # evaluation episodes use seeds derived under this tag, disjoint from training
    seed_offset: int = 1_000_003


@dataclass
class RLConfig:
    ensemble_size: int = 5
    # dynamics updates per collection iteration; 0 means one per vectorized env step
    dynamics_updates: int = 0
    dynamics_lr: float = 1e-5
    mixup_alpha: float = 0.1
    priority_exponent: float = 0.0


@dataclass
class RunConfig:
    env: str = "thawing"
    method: str = "elden"
    seeds: tuple[int, ...] = (0, 1, 2)
    out: str = ""
    steps: int = 500_000
    env_cfg: EnvConfig = field(default_factory=EnvConfig)
    collect: CollectConfig = field(default_factory=CollectConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    rl: RLConfig = field(default_factory=RLConfig)

    def validate(self) -> "RunConfig":
        if self.env not in ENV_NAMES:
            raise ConfigError(f"env: unknown environment {self.env!r}; choose from {ENV_NAMES}")
        if self.method not in RL_METHODS + DETECTION_METHODS:
            raise ConfigError(f"method: unknown method {self.method!r}")
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")
        if self.steps < 1:
            raise ConfigError("steps: must be >= 1")
        return self


# section prefix in the text format -> attribute on RunConfig
_SECTIONS = {
    "env": "env_cfg",
    "collect": "collect",
    "train": "train",
    "eval": "eval",
    "dynamics": "dynamics",
    "ppo": "ppo",
    "reward": "reward",
    "rl": "rl",
}
_TOP = ("env", "method", "seeds", "out", "steps")
# accepted spellings that map onto a canonical key
_ALIASES = {"dynamics.lambda": "dynamics.lam"}


def _fields(obj) -> dict:
    return {f.name: f for f in dataclasses.fields(obj)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_like(key: str, text: str, current):
    text = text.strip()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            f = float(text)
            if f != int(f):
                raise ValueError(text)
            return int(f)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            if text == "":
                return ()
            return tuple(int(float(p)) for p in text.split(","))
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(current).__name__}") from None


def flatten(cfg: RunConfig) -> dict[str, str]:
    flat = {k: _format(getattr(cfg, k)) for k in _TOP}
    for prefix, attr in _SECTIONS.items():
        sub = getattr(cfg, attr)
        for name in _fields(sub):
            flat[f"{prefix}.{name}"] = _format(getattr(sub, name))
    return flat


def set_key(cfg: RunConfig, key: str, text: str) -> None:
    key = _ALIASES.get(key, key)
    if key in _TOP:
        setattr(cfg, key, _parse_like(key, text, getattr(cfg, key)))
        return
    prefix, _, name = key.partition(".")
    attr = _SECTIONS.get(prefix)
    if attr is None or not name:
        raise ConfigError(f"unknown config key {key!r}")
    sub = getattr(cfg, attr)
    if name not in _fields(sub):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(sub, name, _parse_like(key, text, getattr(sub, name)))


def _revalidate(cfg: RunConfig) -> RunConfig:
    # rebuild nested configs so their own __post_init__ checks run
    for attr in ("dynamics", "ppo", "reward"):
        sub = getattr(cfg, attr)
        try:
            setattr(cfg, attr, type(sub)(**dataclasses.asdict(sub)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{attr}: {exc}") from None
    return cfg.validate()


def parse_lines(lines, base: RunConfig | None = None) -> RunConfig:
    cfg = copy_config(base) if base is not None else RunConfig()
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        set_key(cfg, key.strip(), value)
    return _revalidate(cfg)


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    return parse_lines(text.splitlines(), base)


def load(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_text(text, base)


def dump(cfg: RunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in sorted(flatten(cfg).items()))


def copy_config(cfg: RunConfig) -> RunConfig:
    out = RunConfig()
    for k in _TOP:
        setattr(out, k, getattr(cfg, k))
    for attr in _SECTIONS.values():
        setattr(out, attr, dataclasses.replace(getattr(cfg, attr)))
    return out


def env_defaults(env: str, method: str = "elden") -> RunConfig:
    """Desk-scale defaults for one environment and method."""
    cfg = RunConfig(env=env, method=method)
    if env == "carwash":
        cfg.ppo.n_steps = 600
    elif env == "minecraft":
        cfg.ppo.n_steps = 100
        cfg.dynamics.priority_exponent = 0.5
        cfg.rl.priority_exponent = 0.5
    elif env == "synthetic":
        cfg.dynamics.mixup = False
        cfg.dynamics.lam = 0.0
        cfg.train.batches = 20_000
        cfg.collect.n = 20_000
    if env in ("thawing", "carwash"):
        # prioritization is not used for these tasks
        cfg.dynamics.priority_exponent = 0.0
    if method == "pcmi":
        cfg.dynamics.feature_dropout = 0.2
        cfg.dynamics.lam = 0.0
    elif method == "attn":
        cfg.dynamics.lam = 0.0
    if method == "vanilla":
        cfg.reward.kind = "none"
        cfg.reward.beta = 0.0
    elif method in RL_METHODS:
        cfg.reward.kind = method
    return cfg
