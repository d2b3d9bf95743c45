from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .._kernels import adam_update

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def adam_step(params: dict, grads: dict, state: AdamState) -> bool:
    """In-place Adam update with bias correction.

    ``params`` maps names to Tensors (their ``.data`` is updated), ``grads``
    maps the same names to arrays. Returns False (and changes nothing) when any
    gradient is non-finite.
    """
    for name, g in grads.items():
        g = np.asarray(g)
        if g.shape != params[name].shape:
            raise ValueError(f"adam_step: grad for {name} has shape {g.shape}, param {params[name].shape}")
        if not np.isfinite(g).all():
            state.skipped += 1
            log.warning("adam_step: non-finite gradient for %s, step skipped", name)
            return False
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        g = np.asarray(g)
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if not p.data.flags.c_contiguous or not p.data.flags.writeable:
            p.data = np.array(p.data, dtype=np.float64)
        adam_update(p.data, g, m, state.v[name], state.lr, state.beta1, state.beta2, state.eps, c1, c2)
    return True
