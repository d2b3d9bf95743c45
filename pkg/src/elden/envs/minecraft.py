"""2D Minecraft: climb a crafting tree, bridge the river, mine the gem."""

from __future__ import annotations

import numpy as np

from ..schema import Factor, FactorSchema
from .base import Grid, Rule, RuleEnv

ITEMS = ("grass", "wood", "stone", "rope", "bridge", "stick", "wood_pickaxe", "stone_pickaxe", "gem")
ENTITIES = ("grass_patch", "tree", "rock", "gem_ore", "table", "river")
CAP = 4  # inventory counts live in 0..CAP

AGENT, DIR = 0, 1
INV = {name: 2 + k for k, name in enumerate(ITEMS)}
BUILT = 2 + len(ITEMS)
POS = {name: BUILT + 1 + k for k, name in enumerate(ENTITIES)}
N_FACTORS = BUILT + 1 + len(ENTITIES)

GOTO = {name: k for k, name in enumerate(ENTITIES)}
USE = len(ENTITIES)
RECIPES = {
    "rope": {"grass": 1},
    "bridge": {"wood": 1, "rope": 1},
    "stick": {"wood": 1},
    "wood_pickaxe": {"wood": 1, "stick": 1},
    "stone_pickaxe": {"stone": 1, "stick": 1},
}
CRAFT = {name: USE + 1 + k for k, name in enumerate(RECIPES)}
ACTIONS = tuple(f"goto_{e}" for e in ENTITIES) + ("use",) + tuple(f"craft_{r}" for r in RECIPES)


class MinecraftEnv(RuleEnv):
    """``use`` acts on the faced entity: harvest grass/wood, mine stone (needs a
    wood pickaxe) or the gem (needs a stone pickaxe), or lay a bridge on the
    river. The gem ore can only be reached once the bridge is built. Crafting
    needs the agent next to the table.
    """

    name = "minecraft"

    def __init__(self, grid_size: int = 10, episode_length: int = 100, seed: int | None = None,
                 reject_blocked: bool = True):
        self.grid = Grid(grid_size)
        self.episode_length = episode_length
        self.reject_blocked = reject_blocked
        c = self.grid.cells
        factors = [Factor("agent_pos", "cat", c), Factor("agent_dir", "cat", 4)]
        factors += [Factor(f"inv_{name}", "cat", CAP + 1) for name in ITEMS]
        factors += [Factor("bridge_built", "cat", 2)]
        factors += [Factor(f"{e}_pos", "cat", c) for e in ENTITIES]
        self.schema = FactorSchema(tuple(factors), n_actions=len(ACTIONS), action_names=ACTIONS)
        use_targets = tuple(INV[k] for k in ("grass", "wood", "stone", "gem", "bridge")) + (BUILT,)
        self.rules = [Rule(f"goto_{e}", (AGENT, DIR), self._make_goto(e)) for e in ENTITIES]
        self.rules.append(Rule("use", use_targets, self._use))
        for item, needs in RECIPES.items():
            targets = (INV[item],) + tuple(INV[k] for k in needs)
            self.rules.append(Rule(f"craft_{item}", targets, self._make_craft(item, needs)))
        super().__init__(seed)

    def _make_goto(self, entity):
        def goto(x) -> bool:
            if entity == "gem_ore" and x[BUILT] == 0:
                return False
            pos = x[POS[entity]]
            cell = int(self.grid.approach[pos])
            if not self.reject_blocked and any(cell == x[POS[e]] for e in ENTITIES):
                return False
            x[AGENT] = cell
            x[DIR] = int(self.grid.approach_dir[pos])
            return True

        return goto

    def _gain(self, x, item) -> bool:
        k = INV[item]
        if x[k] >= CAP:
            return False
        x[k] = x[k] + 1
        return True

    def _use(self, x) -> bool:
        front = self.grid.front_cell(x[AGENT], x[DIR])
        if front < 0:
            return False
        if front == x[POS["grass_patch"]]:
            return self._gain(x, "grass")
        if front == x[POS["tree"]]:
            return self._gain(x, "wood")
        if front == x[POS["rock"]]:
            return x[INV["wood_pickaxe"]] >= 1 and self._gain(x, "stone")
        if front == x[POS["gem_ore"]]:
            return x[BUILT] == 1 and x[INV["stone_pickaxe"]] >= 1 and self._gain(x, "gem")
        if front == x[POS["river"]]:
            if x[BUILT] == 1 or x[INV["bridge"]] < 1:
                return False
            x[INV["bridge"]] = x[INV["bridge"]] - 1
            x[BUILT] = 1
            return True
        return False

    def _make_craft(self, item, needs):
        def craft(x) -> bool:
            if not self.grid.adjacent(x[AGENT], x[POS["table"]]):
                return False
            if any(x[INV[k]] < n for k, n in needs.items()):
                return False
            if x[INV[item]] >= CAP:
                return False
            for k, n in needs.items():
                x[INV[k]] = x[INV[k]] - n
            x[INV[item]] = x[INV[item]] + 1
            return True

        return craft

    # -- episode ----------------------------------------------------------------
    def _initial_state(self) -> np.ndarray:
        sep = 3 if self.reject_blocked else 1
        cells = self.grid.place(self.rng, len(ENTITIES), sep)
        while True:
            agent = int(self.rng.integers(self.grid.cells))
            if agent not in cells:
                break
        s = np.zeros(N_FACTORS)
        s[AGENT] = agent
        s[DIR] = int(self.rng.integers(4))
        for e, c in zip(ENTITIES, cells):
            s[POS[e]] = c
        return s

    def stage_predicates(self):
        inv = lambda s, k: s[INV[k]]
        return [
            lambda s: inv(s, "rope") >= 1 or inv(s, "bridge") >= 1 or s[BUILT] == 1,
            lambda s: inv(s, "bridge") >= 1 or s[BUILT] == 1,
            lambda s: s[BUILT] == 1,
            lambda s: inv(s, "stick") >= 1 or inv(s, "wood_pickaxe") >= 1,
            lambda s: inv(s, "wood_pickaxe") >= 1,
            lambda s: inv(s, "stone") >= 1 or inv(s, "stone_pickaxe") >= 1,
            lambda s: inv(s, "stone_pickaxe") >= 1,
            lambda s: inv(s, "gem") >= 1,
        ]

    def is_success(self, state) -> bool:
        return state[INV["gem"]] >= 1

    def scripted_action(self, state) -> int:
        s = [int(v) for v in state]
        g = self.grid
        inv = lambda k: s[INV[k]]
        at_table = g.adjacent(s[AGENT], s[POS["table"]])

        def collect(entity):
            facing = g.front_cell(s[AGENT], s[DIR]) == s[POS[entity]]
            return USE if facing else GOTO[entity]

        def craft(item):
            return CRAFT[item] if at_table else GOTO["table"]

        if s[BUILT] == 0:
            if inv("bridge") >= 1:
                return collect("river")
            if inv("rope") >= 1:
                return craft("bridge") if inv("wood") >= 1 else collect("tree")
            return craft("rope") if inv("grass") >= 1 else collect("grass_patch")
        if inv("wood_pickaxe") == 0:
            if inv("stick") >= 1:
                return craft("wood_pickaxe") if inv("wood") >= 1 else collect("tree")
            return craft("stick") if inv("wood") >= 1 else collect("tree")
        if inv("stone_pickaxe") == 0:
            if inv("stone") == 0:
                return collect("rock")
            if inv("stick") >= 1:
                return craft("stone_pickaxe")
            return craft("stick") if inv("wood") >= 1 else collect("tree")
        return collect("gem_ore")
