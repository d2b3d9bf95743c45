from .base import Ctx, FactoredEnv, Grid, Rule, RuleEnv, StageTracker, StepResult
from .carwash import CarWashEnv
from .collect import (
    Dataset,
    load_dataset,
    save_dataset,
    scripted_collect,
)
from .minecraft import MinecraftEnv
from .synthetic import SyntheticLinearEnv
from .thawing import ThawingEnv

ENVS = {
    "thawing": ThawingEnv,
    "carwash": CarWashEnv,
    "minecraft": MinecraftEnv,
    "synthetic": SyntheticLinearEnv,
}


def thawing_env(**kw) -> ThawingEnv:
    return ThawingEnv(**kw)


def carwash_env(**kw) -> CarWashEnv:
    return CarWashEnv(**kw)


def minecraft2d_env(**kw) -> MinecraftEnv:
    return MinecraftEnv(**kw)


def synthetic_linear_env(n: int = 10, sparsity: float = 0.3, seed: int | None = None, **kw) -> SyntheticLinearEnv:
    return SyntheticLinearEnv(n=n, sparsity=sparsity, seed=seed, **kw)


def make_env(name: str, **kw) -> FactoredEnv:
    try:
        cls = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None
    return cls(**kw)
