"""Scripted data collection and the on-disk transition format.

File layout::

    magic        8 bytes  b"ELDNDATA"
    version      u32
    header_len   u32
    header       utf-8 JSON (env, schema, record count, record dtype)
    records      fixed-width little-endian structs, see ``record_dtype``
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..schema import FactorSchema
from .base import FactoredEnv

MAGIC = b"ELDNDATA"
VERSION = 1


@dataclass
class Dataset:
    schema: FactorSchema
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    graphs: np.ndarray  # (n, N+1, N) bool
    stages: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.actions)

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.schema, self.states[idx], self.actions[idx], self.next_states[idx], self.rewards[idx],
            self.dones[idx], self.graphs[idx], self.stages[idx], dict(self.meta),
        )


def scripted_collect(env: FactoredEnv, n_transitions: int, seed: int, epsilon: float = 0.5) -> Dataset:
    """Roll out an epsilon-greedy scripted policy (random primitive with probability epsilon)."""
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    rng = np.random.default_rng(seed)
    schema = env.schema
    n, cols = n_transitions, schema.state_columns
    states = np.zeros((n, cols))
    next_states = np.zeros((n, cols))
    actions = np.zeros(n, dtype=np.int64)
    rewards = np.zeros(n)
    dones = np.zeros(n, dtype=bool)
    graphs = np.zeros((n, schema.n + 1, schema.n), dtype=bool)
    stages = np.zeros(n, dtype=np.int64)
    env.rng = np.random.default_rng(rng.integers(2**63))
    state = env.reset(seed=int(rng.integers(2**63)))
    for k in range(n):
        if rng.random() < epsilon:
            a = int(rng.integers(schema.n_actions))
        else:
            a = env.scripted_action(state)
        res = env.step(a)
        states[k] = state
        actions[k] = a
        next_states[k] = res.next_state
        rewards[k] = res.reward
        dones[k] = res.done
        graphs[k] = res.graph
        stages[k] = res.stage
        state = res.next_state
        if res.done or res.truncated:
            state = env.reset(seed=int(rng.integers(2**63)))
    return Dataset(schema, states, actions, next_states, rewards, dones, graphs, stages,
                   meta={"env": env.name, "seed": seed, "epsilon": epsilon})


def record_dtype(schema: FactorSchema) -> np.dtype:
    n = schema.n
    nbytes = ((n + 1) * n + 7) // 8
    return np.dtype([
        ("state", "<f8", (schema.state_columns,)),
        ("action", "<i4"),
        ("next_state", "<f8", (schema.state_columns,)),
        ("reward", "<f8"),
        ("done", "u1"),
        ("edges", "u1", (nbytes,)),
        ("stage", "<i4"),
    ])


def save_dataset(path: str | Path, data: Dataset) -> None:
    schema = data.schema
    dt = record_dtype(schema)
    rec = np.zeros(len(data), dtype=dt)
    rec["state"] = data.states
    rec["action"] = data.actions
    rec["next_state"] = data.next_states
    rec["reward"] = data.rewards
    rec["done"] = data.dones
    rec["edges"] = np.packbits(data.graphs.reshape(len(data), -1), axis=1, bitorder="little")
    rec["stage"] = data.stages
    header = json.dumps(
        {"schema": schema.to_dict(), "count": len(data), "record_size": dt.itemsize, "meta": data.meta},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(rec.tobytes())


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a transition dataset")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        return json.loads(fh.read(hlen).decode("utf-8"))


def load_dataset(path: str | Path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a transition dataset")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    schema = FactorSchema.from_dict(header["schema"])
    dt = record_dtype(schema)
    count = header["count"]
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=16 + hlen)
    if 16 + hlen + count * dt.itemsize != len(buf):
        raise ValueError(f"{path}: record stream length does not match header count {count}")
    n = schema.n
    graphs = np.unpackbits(rec["edges"], axis=1, count=(n + 1) * n, bitorder="little").astype(bool)
    return Dataset(
        schema,
        rec["state"].copy(),
        rec["action"].astype(np.int64),
        rec["next_state"].copy(),
        rec["reward"].copy(),
        rec["done"].astype(bool),
        graphs.reshape(count, n + 1, n),
        rec["stage"].astype(np.int64),
        header.get("meta", {}),
    )
