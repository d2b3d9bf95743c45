"""Factored environments with per-step ground-truth dependency graphs.

Discrete environments are written as one rule per action primitive. A rule
reads factors through a :class:`Ctx`, which records every factor that was
actually evaluated (Python's short-circuiting decides which), and writes
through it. The ground-truth graph of a step is then:

* ``i -> j`` for every target ``j`` the rule may write and every factor ``i``
  that was read and is in the rule's declared read-set for ``j``;
* ``action -> j`` for every target the rule may write;
* ``j -> j`` for every factor that was not written (persistence).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from ..schema import FactorSchema


class StepResult(NamedTuple):
    next_state: np.ndarray
    reward: float
    done: bool
    graph: np.ndarray  # (N+1, N) bool; last row is the action
    stage: int
    truncated: bool


class Ctx:
    __slots__ = ("s", "reads", "writes")

    def __init__(self, state):
        self.s = state
        self.reads: set[int] = set()
        self.writes: dict[int, int] = {}

    def __getitem__(self, k: int):
        self.reads.add(k)
        return self.s[k]

    def __setitem__(self, k: int, v) -> None:
        self.writes[k] = v


@dataclass
class Rule:
    name: str
    targets: tuple[int, ...]
    fn: Callable[[Ctx], bool]
    # declared read-set per target; None means any factor the rule evaluates
    reads: dict[int, frozenset[int]] | None = None


class StageTracker:
    """Highest ordered milestone reached in the current episode."""

    def __init__(self, predicates: list[Callable[[np.ndarray], bool]]):
        self.predicates = predicates
        self.stage = 0

    @property
    def total(self) -> int:
        return len(self.predicates)

    def reset(self) -> None:
        self.stage = 0

    def update(self, state: np.ndarray) -> int:
        while self.stage < self.total and self.predicates[self.stage](state):
            self.stage += 1
        return self.stage

    @property
    def normalized(self) -> float:
        return self.stage / self.total if self.total else 0.0


class FactoredEnv:
    """Common episode bookkeeping; subclasses provide ``transition`` and ``_initial_state``."""

    name = "base"
    schema: FactorSchema
    episode_length: int

    def __init__(self, seed: int | None = None):
        self.rng = np.random.default_rng(seed)
        self.state: np.ndarray | None = None
        self.t = 0
        self.tracker = StageTracker(self.stage_predicates())

    # subclasses -------------------------------------------------------------
    def stage_predicates(self) -> list[Callable[[np.ndarray], bool]]:
        return []

    def _initial_state(self) -> np.ndarray:
        raise NotImplementedError

    def transition(self, state: np.ndarray, action: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def is_success(self, state: np.ndarray) -> bool:
        return False

    def scripted_action(self, state: np.ndarray) -> int:
        """Next stage-advancing primitive."""
        return int(self.rng.integers(self.schema.n_actions))

    # episode API ------------------------------------------------------------
    @property
    def n_stages(self) -> int:
        return self.tracker.total

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = self._initial_state()
        self.t = 0
        self.tracker.reset()
        self.tracker.update(self.state)
        return self.state.copy()

    def check_action(self, action) -> int:
        a = int(action)
        if a != action or not 0 <= a < self.schema.n_actions:
            raise ValueError(f"{self.name}: invalid action {action!r} (expected 0..{self.schema.n_actions - 1})")
        return a

    def step(self, action) -> StepResult:
        if self.state is None:
            raise RuntimeError(f"{self.name}: step() before reset()")
        a = self.check_action(action)
        nxt, graph = self.transition(self.state, a)
        self.t += 1
        self.state = nxt
        stage = self.tracker.update(nxt)
        success = self.is_success(nxt)
        reward = 1.0 if success else 0.0
        truncated = (not success) and self.t >= self.episode_length
        return StepResult(nxt.copy(), reward, success, graph, stage, truncated)


class RuleEnv(FactoredEnv):
    """Discrete environment whose transitions are one :class:`Rule` per action."""

    rules: list[Rule]

    def __init__(self, seed: int | None = None):
        super().__init__(seed)
        n = self.schema.n
        self.rule_fires = np.zeros(len(self.rules), dtype=np.int64)
        self._rule_rows = []
        for rule in self.rules:
            allowed = {}
            for j in rule.targets:
                allowed[j] = None if rule.reads is None else rule.reads.get(j)
            self._rule_rows.append(allowed)
        self._n = n

    def transition(self, state: np.ndarray, action: int) -> tuple[np.ndarray, np.ndarray]:
        rule = self.rules[action]
        s = [int(v) for v in state]
        ctx = Ctx(s)
        if rule.fn(ctx):
            self.rule_fires[action] += 1
        n = self._n
        graph = np.zeros((n + 1, n), dtype=bool)
        nxt = np.array(s, dtype=np.float64)
        for k, v in ctx.writes.items():
            nxt[k] = v
        reads = ctx.reads
        for j, allowed in self._rule_rows[action].items():
            graph[n, j] = True
            for i in reads:
                if allowed is None or i in allowed:
                    graph[i, j] = True
        for j in range(n):
            if j not in ctx.writes:
                graph[j, j] = True
        return nxt, graph


# -- grid helpers -----------------------------------------------------------------

# up, right, down, left as (dx, dy)
DIRS = ((0, -1), (1, 0), (0, 1), (-1, 0))


class Grid:
    def __init__(self, size: int):
        self.size = size
        self.cells = size * size
        g = size
        self.front = np.full((self.cells, 4), -1, dtype=np.int64)
        self.approach = np.full(self.cells, -1, dtype=np.int64)
        self.approach_dir = np.zeros(self.cells, dtype=np.int64)
        for c in range(self.cells):
            x, y = c % g, c // g
            for d, (dx, dy) in enumerate(DIRS):
                nx, ny = x + dx, y + dy
                if 0 <= nx < g and 0 <= ny < g:
                    self.front[c, d] = ny * g + nx
            # first in-bounds neighbour in up/right/down/left order, facing back
            for d, (dx, dy) in enumerate(DIRS):
                nx, ny = x + dx, y + dy
                if 0 <= nx < g and 0 <= ny < g:
                    self.approach[c] = ny * g + nx
                    self.approach_dir[c] = (d + 2) % 4
                    break

    def adjacent(self, a: int, b: int) -> bool:
        if not (0 <= a < self.cells and 0 <= b < self.cells):
            return False
        g = self.size
        return abs(a % g - b % g) + abs(a // g - b // g) == 1

    def front_cell(self, pos: int, direction: int) -> int:
        if not 0 <= pos < self.cells:
            return -1
        return int(self.front[pos, direction])

    def chebyshev(self, a: int, b: int) -> int:
        g = self.size
        return max(abs(a % g - b % g), abs(a // g - b // g))

    def place(self, rng: np.random.Generator, k: int, min_sep: int, tries: int = 1000) -> list[int]:
        """k distinct cells pairwise at Chebyshev distance >= min_sep (relaxed if impossible)."""
        for sep in range(min_sep, 0, -1):
            for _ in range(tries):
                cells = rng.choice(self.cells, size=k, replace=False)
                ok = all(self.chebyshev(int(a), int(b)) >= sep for i, a in enumerate(cells) for b in cells[i + 1 :])
                if ok:
                    return [int(c) for c in cells]
        raise RuntimeError("could not place entities")
