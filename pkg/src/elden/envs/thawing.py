"""Thawing: open the fridge, take the frozen fish out, put it in the sink."""

from __future__ import annotations

import numpy as np

from ..schema import Factor, FactorSchema
from .base import Grid, Rule, RuleEnv

AGENT, DIR, FISH, THAW, OPEN, SINK, FRIDGE, CARRIED = range(8)

GOTO_FRIDGE, GOTO_SINK, GOTO_FISH, PICK, DROP, OPEN_DOOR, CLOSE_DOOR = range(7)
ACTIONS = ("goto_fridge", "goto_sink", "goto_fish", "pick_fish", "drop_fish", "open_fridge", "close_fridge")


class ThawingEnv(RuleEnv):
    """Positions are cell indices ``y * grid + x``; a carried fish sits in the extra ``HAND`` cell.

    Interaction guards (pick, open, close) need the agent orthogonally adjacent
    to the target; drop places the fish on the faced cell. The fish thaws when
    it is dropped into the sink.
    """

    name = "thawing"

    def __init__(self, grid_size: int = 10, episode_length: int = 20, seed: int | None = None,
                 reject_blocked: bool = True):
        self.grid = Grid(grid_size)
        self.HAND = self.grid.cells
        self.episode_length = episode_length
        self.reject_blocked = reject_blocked
        c = self.grid.cells
        self.schema = FactorSchema(
            factors=(
                Factor("agent_pos", "cat", c),
                Factor("agent_dir", "cat", 4),
                Factor("fish_pos", "cat", c + 1),
                Factor("fish_thawed", "cat", 2),
                Factor("fridge_open", "cat", 2),
                Factor("sink_pos", "cat", c),
                Factor("fridge_pos", "cat", c),
                Factor("carrying_fish", "cat", 2),
            ),
            n_actions=len(ACTIONS),
            action_names=ACTIONS,
        )
        self.rules = [
            Rule("goto_fridge", (AGENT, DIR), lambda x: self._goto(x, FRIDGE)),
            Rule("goto_sink", (AGENT, DIR), lambda x: self._goto(x, SINK)),
            Rule("goto_fish", (AGENT, DIR), lambda x: self._goto(x, FISH)),
            Rule("pick_fish", (CARRIED, FISH), self._pick),
            Rule("drop_fish", (CARRIED, FISH, THAW), self._drop, reads={
                CARRIED: frozenset({CARRIED, AGENT, DIR, FRIDGE, OPEN}),
                FISH: frozenset({CARRIED, AGENT, DIR, FRIDGE, OPEN}),
                THAW: frozenset(range(8)),
            }),
            Rule("open_fridge", (OPEN,), lambda x: self._door(x, 1)),
            Rule("close_fridge", (OPEN,), lambda x: self._door(x, 0)),
        ]
        super().__init__(seed)

    # -- rules ----------------------------------------------------------------
    def _goto(self, x, target) -> bool:
        pos = x[target]
        if pos >= self.grid.cells:
            return False
        cell = int(self.grid.approach[pos])
        if not self.reject_blocked and (cell == x[SINK] or cell == x[FRIDGE]):
            return False
        x[AGENT] = cell
        x[DIR] = int(self.grid.approach_dir[pos])
        return True

    def _pick(self, x) -> bool:
        if x[CARRIED] == 1:
            return False
        if not self.grid.adjacent(x[AGENT], x[FISH]):
            return False
        if x[FISH] == x[FRIDGE] and x[OPEN] == 0:
            return False
        x[CARRIED] = 1
        x[FISH] = self.HAND
        return True

    def _drop(self, x) -> bool:
        if x[CARRIED] == 0:
            return False
        front = self.grid.front_cell(x[AGENT], x[DIR])
        if front < 0:
            return False
        if front == x[FRIDGE] and x[OPEN] == 0:
            return False
        x[CARRIED] = 0
        x[FISH] = front
        if front == x[SINK]:
            x[THAW] = 1
        return True

    def _door(self, x, value) -> bool:
        if not self.grid.adjacent(x[AGENT], x[FRIDGE]):
            return False
        x[OPEN] = value
        return True

    # -- episode ----------------------------------------------------------------
    def _initial_state(self) -> np.ndarray:
        sep = 3 if self.reject_blocked else 1
        sink, fridge = self.grid.place(self.rng, 2, sep)
        while True:
            agent = int(self.rng.integers(self.grid.cells))
            if agent not in (sink, fridge):
                break
        s = np.zeros(self.schema.n)
        s[[AGENT, DIR, FISH, THAW, OPEN, SINK, FRIDGE, CARRIED]] = [
            agent, int(self.rng.integers(4)), fridge, 0, 0, sink, fridge, 0,
        ]
        return s

    def stage_predicates(self):
        return [
            lambda s: s[OPEN] == 1,
            lambda s: s[CARRIED] == 1 or s[FISH] != s[FRIDGE],
            lambda s: s[THAW] == 1,
        ]

    def is_success(self, state) -> bool:
        return state[THAW] == 1

    def scripted_action(self, state) -> int:
        s = [int(v) for v in state]
        g = self.grid
        if s[CARRIED] == 1:
            if g.front_cell(s[AGENT], s[DIR]) == s[SINK]:
                return DROP
            return GOTO_SINK
        if s[FISH] == s[FRIDGE] and s[OPEN] == 0:
            return OPEN_DOOR if g.adjacent(s[AGENT], s[FRIDGE]) else GOTO_FRIDGE
        if s[THAW] == 0:
            return PICK if g.adjacent(s[AGENT], s[FISH]) else GOTO_FISH
        return int(self.rng.integers(self.schema.n_actions))
