from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Factor:
    name: str
    kind: str  # "cat" or "real"
    size: int  # class count for "cat", dimension for "real"

    def __post_init__(self):
        if self.kind not in ("cat", "real"):
            raise ValueError(f"factor {self.name}: kind must be 'cat' or 'real', got {self.kind!r}")
        if self.kind == "cat" and self.size < 2:
            raise ValueError(f"factor {self.name}: categorical factors need >= 2 classes")
        if self.kind == "real" and self.size < 1:
            raise ValueError(f"factor {self.name}: real factors need dimension >= 1")

    @property
    def columns(self) -> int:
        return 1 if self.kind == "cat" else self.size


@dataclass(frozen=True)
class FactorSchema:
    """Per-factor layout of a factored state plus a categorical action.

    A raw state is a flat float vector: one column per categorical factor
    (holding the class index) and ``size`` columns per real factor.
    """

    factors: tuple[Factor, ...]
    n_actions: int
    action_names: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.factors) < 2:
            raise ValueError("schema needs at least 2 factors")
        if self.n_actions < 1:
            raise ValueError("schema needs at least 1 action")

    @property
    def n(self) -> int:
        return len(self.factors)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.factors]

    @cached_property
    def col_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([f.columns for f in self.factors])]).astype(np.int64)

    @property
    def state_columns(self) -> int:
        return int(self.col_offsets[-1])

    @property
    def is_discrete(self) -> bool:
        return all(f.kind == "cat" for f in self.factors)

    @cached_property
    def input_dims(self) -> list[int]:
        """Encoded width of every input token: the N factors, then the action."""
        return [f.size for f in self.factors] + [self.n_actions]

    @cached_property
    def input_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.input_dims)]).astype(np.int64)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def validate_state(self, state: np.ndarray) -> None:
        state = np.asarray(state)
        if state.shape[-1] != self.state_columns:
            raise ValueError(f"state has {state.shape[-1]} columns, schema expects {self.state_columns}")
        for k, f in enumerate(self.factors):
            if f.kind != "cat":
                continue
            col = state[..., self.col_offsets[k]]
            if np.any(col < 0) or np.any(col >= f.size) or np.any(col != np.round(col)):
                raise ValueError(f"factor {f.name}: category out of range [0, {f.size})")

    def to_dict(self) -> dict:
        return {
            "factors": [[f.name, f.kind, f.size] for f in self.factors],
            "n_actions": self.n_actions,
            "action_names": list(self.action_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FactorSchema":
        return cls(
            factors=tuple(Factor(n, k, int(s)) for n, k, s in d["factors"]),
            n_actions=int(d["n_actions"]),
            action_names=tuple(d.get("action_names", ())),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
