"""CarWash: soak a rag in the sink, clean the car, then wash the rag with soap in the bucket."""

from __future__ import annotations

import numpy as np

from ..schema import Factor, FactorSchema
from .base import Grid, Rule, RuleEnv

(AGENT, DIR, RAG, SOAK, DIRTY, SOAP, CAR_CLEAN, SINK_ON, CARRIED,
 SHELF, SINK, CAR, BUCKET) = range(13)

NOTHING, HOLD_RAG, HOLD_SOAP = 0, 1, 2

(GOTO_SHELF, GOTO_SINK, GOTO_CAR, GOTO_BUCKET, GOTO_RAG, GOTO_SOAP,
 PICK_RAG, DROP_RAG, PICK_SOAP, DROP_SOAP, TOGGLE_SINK) = range(11)
ACTIONS = ("goto_shelf", "goto_sink", "goto_car", "goto_bucket", "goto_rag", "goto_soap",
           "pick_rag", "drop_rag", "pick_soap", "drop_soap", "toggle_sink")

STATIC = (SHELF, SINK, CAR, BUCKET)

_ALL = frozenset(range(13))
# the car and soak checks decide whether a rag drop happens at all; the bucket
# and soap only matter for washing the rag
_GUARD_RAG = frozenset({CARRIED, AGENT, DIR, CAR, SOAK} | set(STATIC))
_GUARD_SOAP = frozenset({CARRIED, AGENT, DIR} | set(STATIC))


class CarWashEnv(RuleEnv):
    """Dropping a soaked rag onto the car cleans the car and dirties the rag.

    The rag becomes clean again once rag and soap are both in the bucket.
    Toggling the sink on while the rag lies in it soaks the rag.
    """

    name = "carwash"

    def __init__(self, grid_size: int = 10, episode_length: int = 100, seed: int | None = None,
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
                Factor("rag_pos", "cat", c + 1),
                Factor("rag_soaked", "cat", 2),
                Factor("rag_dirty", "cat", 2),
                Factor("soap_pos", "cat", c + 1),
                Factor("car_clean", "cat", 2),
                Factor("sink_on", "cat", 2),
                Factor("carrying", "cat", 3),
                Factor("shelf_pos", "cat", c),
                Factor("sink_pos", "cat", c),
                Factor("car_pos", "cat", c),
                Factor("bucket_pos", "cat", c),
            ),
            n_actions=len(ACTIONS),
            action_names=ACTIONS,
        )
        goto = lambda e: (lambda x: self._goto(x, e))
        self.rules = [
            Rule("goto_shelf", (AGENT, DIR), goto(SHELF)),
            Rule("goto_sink", (AGENT, DIR), goto(SINK)),
            Rule("goto_car", (AGENT, DIR), goto(CAR)),
            Rule("goto_bucket", (AGENT, DIR), goto(BUCKET)),
            Rule("goto_rag", (AGENT, DIR), goto(RAG)),
            Rule("goto_soap", (AGENT, DIR), goto(SOAP)),
            Rule("pick_rag", (CARRIED, RAG), lambda x: self._pick(x, RAG, HOLD_RAG)),
            Rule("drop_rag", (CARRIED, RAG, CAR_CLEAN, DIRTY), self._drop_rag, reads={
                CARRIED: _GUARD_RAG, RAG: _GUARD_RAG, CAR_CLEAN: _GUARD_RAG, DIRTY: _ALL,
            }),
            Rule("pick_soap", (CARRIED, SOAP), lambda x: self._pick(x, SOAP, HOLD_SOAP)),
            Rule("drop_soap", (CARRIED, SOAP, DIRTY), self._drop_soap, reads={
                CARRIED: _GUARD_SOAP, SOAP: _GUARD_SOAP, DIRTY: _ALL,
            }),
            Rule("toggle_sink", (SINK_ON, SOAK), self._toggle, reads={
                SINK_ON: frozenset({AGENT, SINK, SINK_ON}), SOAK: _ALL,
            }),
        ]
        super().__init__(seed)

    # -- rules ----------------------------------------------------------------
    def _goto(self, x, target) -> bool:
        pos = x[target]
        if pos >= self.grid.cells:
            return False
        cell = int(self.grid.approach[pos])
        if not self.reject_blocked and any(cell == x[k] for k in STATIC):
            return False
        x[AGENT] = cell
        x[DIR] = int(self.grid.approach_dir[pos])
        return True

    def _pick(self, x, obj, hold) -> bool:
        if x[CARRIED] != NOTHING:
            return False
        if not self.grid.adjacent(x[AGENT], x[obj]):
            return False
        x[CARRIED] = hold
        x[obj] = self.HAND
        return True

    def _drop_rag(self, x) -> bool:
        if x[CARRIED] != HOLD_RAG:
            return False
        front = self.grid.front_cell(x[AGENT], x[DIR])
        if front < 0:
            return False
        if front == x[CAR]:
            if x[SOAK] == 0:
                return False
            x[CAR_CLEAN] = 1
            x[DIRTY] = 1
        elif front == x[BUCKET] and x[SOAP] == front:
            x[DIRTY] = 0
        x[CARRIED] = NOTHING
        x[RAG] = front
        return True

    def _drop_soap(self, x) -> bool:
        if x[CARRIED] != HOLD_SOAP:
            return False
        front = self.grid.front_cell(x[AGENT], x[DIR])
        if front < 0:
            return False
        if front == x[BUCKET] and x[RAG] == front:
            x[DIRTY] = 0
        x[CARRIED] = NOTHING
        x[SOAP] = front
        return True

    def _toggle(self, x) -> bool:
        if not self.grid.adjacent(x[AGENT], x[SINK]):
            return False
        on = 1 - x[SINK_ON]
        x[SINK_ON] = on
        if on == 1 and x[RAG] == x[SINK]:
            x[SOAK] = 1
        return True

    # -- episode ----------------------------------------------------------------
    def _initial_state(self) -> np.ndarray:
        sep = 3 if self.reject_blocked else 1
        shelf, sink, car, bucket = self.grid.place(self.rng, 4, sep)
        while True:
            agent = int(self.rng.integers(self.grid.cells))
            if agent not in (shelf, sink, car, bucket):
                break
        s = np.zeros(self.schema.n)
        s[AGENT] = agent
        s[DIR] = int(self.rng.integers(4))
        s[RAG] = shelf
        s[SOAP] = shelf
        s[SHELF], s[SINK], s[CAR], s[BUCKET] = shelf, sink, car, bucket
        return s

    def stage_predicates(self):
        return [
            lambda s: s[CARRIED] == HOLD_RAG or s[RAG] != s[SHELF],
            lambda s: s[RAG] == s[SINK],
            lambda s: s[SOAK] == 1,
            lambda s: s[CAR_CLEAN] == 1,
            lambda s: s[CARRIED] == HOLD_SOAP or s[SOAP] != s[SHELF],
            lambda s: s[CAR_CLEAN] == 1 and s[DIRTY] == 0 and s[RAG] == s[BUCKET] and s[SOAP] == s[BUCKET],
        ]

    def is_success(self, state) -> bool:
        return self.tracker.stage >= self.tracker.total

    def scripted_action(self, state) -> int:
        s = [int(v) for v in state]
        g = self.grid
        facing = g.front_cell(s[AGENT], s[DIR])

        def fetch(obj, pick, goto):
            return pick if g.adjacent(s[AGENT], s[obj]) else goto

        if s[CAR_CLEAN] == 0:
            if s[SOAK] == 0:
                if s[RAG] == s[SINK]:
                    return TOGGLE_SINK if g.adjacent(s[AGENT], s[SINK]) else GOTO_SINK
                if s[CARRIED] == HOLD_RAG:
                    return DROP_RAG if facing == s[SINK] else GOTO_SINK
                if s[CARRIED] == HOLD_SOAP:
                    return DROP_SOAP
                return fetch(RAG, PICK_RAG, GOTO_RAG)
            if s[CARRIED] == HOLD_RAG:
                return DROP_RAG if facing == s[CAR] else GOTO_CAR
            if s[CARRIED] == HOLD_SOAP:
                return DROP_SOAP
            return fetch(RAG, PICK_RAG, GOTO_RAG)
        if s[RAG] != s[BUCKET]:
            if s[CARRIED] == HOLD_RAG:
                return DROP_RAG if facing == s[BUCKET] else GOTO_BUCKET
            if s[CARRIED] == HOLD_SOAP:
                return DROP_SOAP if facing == s[BUCKET] else GOTO_BUCKET
            return fetch(RAG, PICK_RAG, GOTO_RAG)
        if s[CARRIED] == HOLD_SOAP:
            return DROP_SOAP if facing == s[BUCKET] else GOTO_BUCKET
        if s[SOAP] != s[BUCKET]:
            return fetch(SOAP, PICK_SOAP, GOTO_SOAP)
        return int(self.rng.integers(self.schema.n_actions))
