"""Input Jacobians and their parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, abs_, grad, sum_


@dataclass
class PassCounter:
    """Transition-level pass counts: a batch of B transitions adds B per sweep."""

    forward: int = 0
    backward: int = 0
    flagged: int = 0

    def reset(self) -> None:
        self.forward = self.backward = self.flagged = 0


@dataclass
class JacobianResult:
    # (batch, input_dim, n_outputs)
    values: np.ndarray
    # transitions whose outputs or derivatives were non-finite
    flagged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def input_jacobian(
    model_apply: Callable[[Tensor], Tensor],
    inputs: np.ndarray,
    counter: PassCounter | None = None,
) -> JacobianResult:
    """d out[b, j] / d inputs[b, d] for a model mapping (B, D) -> (B, N).

    One forward pass, then one backward sweep per output column j. Rows of
    the batch must not interact inside ``model_apply``.
    """
    x = Tensor(np.array(inputs, dtype=np.float64), requires_grad=True)
    out = model_apply(x)
    if out.ndim != 2 or out.shape[0] != x.shape[0]:
        raise ValueError(f"input_jacobian: expected output (B, N), got {out.shape}")
    n_out = out.shape[1]
    if counter is not None:
        counter.forward += x.shape[0]
    jac = np.zeros((x.shape[0], x.shape[1], n_out))
    for j in range(n_out):
        seed = np.zeros(out.shape)
        seed[:, j] = 1.0
        (gx,) = grad(out, [x], seed=seed)
        jac[:, :, j] = gx.data
        if counter is not None:
            counter.backward += x.shape[0]
    flagged = ~np.isfinite(out.data).all(axis=1) | ~np.isfinite(jac).all(axis=(1, 2))
    if counter is not None:
        counter.flagged += int(flagged.sum())
    jac[flagged] = 0.0
    return JacobianResult(jac, flagged)


def jacobian_l1(
    model_apply: Callable[[Tensor], Tensor], x: Tensor
) -> Tensor:
    """Recorded sum over batch, inputs and outputs of |d out / d x|.

    The per-output backward sweeps are built with ``create_graph`` so the
    returned scalar can be differentiated w.r.t. model parameters.
    """
    out = model_apply(x)
    total = None
    for j in range(out.shape[1]):
        seed = np.zeros(out.shape)
        seed[:, j] = 1.0
        (gx,) = grad(out, [x], seed=seed, create_graph=True)
        term = sum_(abs_(gx))
        total = term if total is None else total + term
    return total


def second_order_grad(
    model_apply: Callable[[Tensor], Tensor],
    inputs: np.ndarray,
    params: Sequence[Tensor],
) -> tuple[float, list[np.ndarray]]:
    """Value of the Jacobian L1 penalty and its gradient w.r.t. ``params``."""
    x = Tensor(np.array(inputs, dtype=np.float64), requires_grad=True)
    penalty = jacobian_l1(model_apply, x)
    gs = grad(penalty, list(params))
    return penalty.item(), [g.data for g in gs]


def finite_difference(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function w.r.t. every entry of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    res = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = fn()
        flat[k] = orig - h
        down = fn()
        flat[k] = orig
        res[k] = (up - down) / (2 * h)
    return out
