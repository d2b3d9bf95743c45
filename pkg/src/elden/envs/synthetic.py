"""Sparse linear-Gaussian dynamics with a known dependency mask."""

from __future__ import annotations

import numpy as np

from ..schema import Factor, FactorSchema
from .base import FactoredEnv

MACHINE_EPS = 1e-12


class SyntheticLinearEnv(FactoredEnv):
    """``s' = (mask * W) s + b + noise`` over N scalar real factors.

    The action (two primitives) has no effect. ``sparsity`` is the probability
    that any given input->target entry of the mask is active.
    """

    name = "synthetic"

    def __init__(self, n: int = 10, sparsity: float = 0.3, seed: int | None = None,
                 noise: float = 0.1, episode_length: int = 20,
                 weights: np.ndarray | None = None, bias: np.ndarray | None = None):
        if n < 2:
            raise ValueError("synthetic env needs n >= 2")
        if not 0.0 < sparsity < 1.0:
            raise ValueError("sparsity must lie in (0, 1)")
        self.n = n
        self.noise = noise
        self.episode_length = episode_length
        self.schema = FactorSchema(
            tuple(Factor(f"x{k}", "real", 1) for k in range(n)), n_actions=2, action_names=("a0", "a1")
        )
        gen = np.random.default_rng(seed)
        if weights is None:
            mask = gen.random((n, n)) < sparsity
            w = gen.uniform(0.5, 1.0, size=(n, n)) * gen.choice([-1.0, 1.0], size=(n, n))
            weights = mask * w
            radius = np.max(np.abs(np.linalg.eigvals(weights))) if mask.any() else 0.0
            if radius > 0.9:
                weights = weights * (0.9 / radius)
        self.weights = np.asarray(weights, dtype=np.float64)  # [target, input]
        self.mask = self.weights != 0.0
        self.bias = np.zeros(n) if bias is None else np.asarray(bias, dtype=np.float64)
        super().__init__(seed)

    def global_graph(self) -> np.ndarray:
        g = np.zeros((self.n + 1, self.n), dtype=bool)
        g[: self.n] = self.mask.T
        return g

    def _initial_state(self) -> np.ndarray:
        return self.rng.normal(size=self.n)

    def local_graph(self, state: np.ndarray) -> np.ndarray:
        g = np.zeros((self.n + 1, self.n), dtype=bool)
        contrib = np.abs(self.weights * state[None, :])  # [target, input]
        g[: self.n] = (self.mask & (contrib > MACHINE_EPS)).T
        return g

    def mean_next(self, state: np.ndarray) -> np.ndarray:
        return self.weights @ state + self.bias

    def transition(self, state, action):
        nxt = self.mean_next(state) + self.noise * self.rng.normal(size=self.n)
        return nxt, self.local_graph(np.asarray(state))
