"""Dense float64 tensors with a reverse-mode tape.

Every vector-Jacobian product is itself written with tensor ops, so a
backward pass run with ``create_graph=True`` is recorded like any other
computation and can be differentiated again (reverse-over-reverse).
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()
_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


class no_grad:
    """Context manager that disables recording of new nodes."""

    def __enter__(self):
        self._prev = grad_enabled()
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _local.grad_enabled = self._prev
        return False


class _enable_grad:
    def __init__(self, flag: bool):
        self.flag = flag

    def __enter__(self):
        self._prev = grad_enabled()
        _local.grad_enabled = self.flag
        return self

    def __exit__(self, *exc):
        _local.grad_enabled = self._prev
        return False


class Node:
    __slots__ = ("id", "kind", "inputs", "attrs")

    def __init__(self, kind: str, inputs: tuple, attrs: dict):
        self.id = next(_ids)
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs


class Tape:
    """Ordered log of recorded nodes plus a registry of named parameters.

    Recording happens on whichever tape is active (``with Tape() as t:``).
    Gradients do not need a tape: nodes keep references to their inputs.
    The tape exists so a computation can be inspected, counted and replayed.
    """

    def __init__(self):
        self.entries: list[tuple[Node, Tensor]] = []
        self.params: dict[str, Tensor] = {}

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def register(self, name: str, tensor: "Tensor") -> "Tensor":
        self.params[name] = tensor
        return tensor

    def count(self, kind: str) -> int:
        return sum(1 for node, _ in self.entries if node.kind == kind)

    def replay(self) -> bool:
        """Recompute every node from its inputs; True iff all outputs match bit-for-bit."""
        for node, out in self.entries:
            fwd = _OPS[node.kind][0]
            data = fwd(*[t.data for t in node.inputs], **node.attrs)
            if data.shape != out.data.shape or not np.array_equal(data, out.data):
                return False
        return True


def _active_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Tensor | None = None
        self.node: Node | None = None
        self.name = name

    # -- conveniences -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
    tape = _active_tape()
    if tape is not None and name is not None:
        tape.register(name, t)
    return t


# -- op registry -------------------------------------------------------------

# kind -> (forward on arrays, vjp(g, out, *inputs, **attrs) -> tuple of grads)
_OPS: dict[str, tuple[Callable, Callable]] = {}


def _register(kind: str, fwd: Callable, vjp: Callable) -> None:
    _OPS[kind] = (fwd, vjp)


def op_kinds() -> list[str]:
    return sorted(_OPS)


def _apply(kind: str, inputs: tuple, **attrs) -> Tensor:
    fwd = _OPS[kind][0]
    try:
        data = fwd(*[t.data for t in inputs], **attrs)
    except ValueError as exc:
        shapes = " and ".join(str(t.shape) for t in inputs)
        raise ShapeError(f"{kind}: incompatible shapes {shapes} ({exc})") from None
    out = Tensor(data)
    if _local_grad() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = out.node = Node(kind, inputs, attrs)
        tape = _active_tape()
        if tape is not None:
            tape.entries.append((node, out))
    return out


def _local_grad() -> bool:
    return getattr(_local, "grad_enabled", True)


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Apply a registered op by name, recording it on the active tape."""
    if kind == "slice":
        kind = "getitem"
    if kind not in _OPS:
        raise KeyError(f"unknown op {kind!r}")
    if kind == "concat":
        return concat(list(inputs), **attrs)
    return _apply(kind, tuple(as_tensor(x) for x in inputs), **attrs)


# -- shape helpers -------------------------------------------------------------


def _sum_to_array(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    out = g.sum(axis=axes, keepdims=True) if axes else g
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _apply("sum_to", (x,), shape=shape)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _apply("broadcast_to", (x,), shape=shape)


_register(
    "sum_to",
    lambda x, shape: _sum_to_array(x, shape),
    lambda g, out, x, shape: (broadcast_to(g, x.shape),),
)
_register(
    "broadcast_to",
    lambda x, shape: np.broadcast_to(x, shape).copy(),
    lambda g, out, x, shape: (sum_to(g, x.shape),),
)


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    return _apply("add", (as_tensor(a), as_tensor(b)))


def sub(a, b) -> Tensor:
    return _apply("sub", (as_tensor(a), as_tensor(b)))


def mul(a, b) -> Tensor:
    return _apply("mul", (as_tensor(a), as_tensor(b)))


def div(a, b) -> Tensor:
    return _apply("div", (as_tensor(a), as_tensor(b)))


def neg(x) -> Tensor:
    return _apply("neg", (as_tensor(x),))


def _needs(t: Tensor) -> bool:
    # grads for constants are never consumed; skipping them saves work
    return t.requires_grad


_register(
    "add",
    np.add,
    lambda g, out, a, b: (
        sum_to(g, a.shape) if _needs(a) else None,
        sum_to(g, b.shape) if _needs(b) else None,
    ),
)
_register(
    "sub",
    np.subtract,
    lambda g, out, a, b: (
        sum_to(g, a.shape) if _needs(a) else None,
        sum_to(neg(g), b.shape) if _needs(b) else None,
    ),
)
_register(
    "mul",
    np.multiply,
    lambda g, out, a, b: (
        sum_to(mul(g, b), a.shape) if _needs(a) else None,
        sum_to(mul(g, a), b.shape) if _needs(b) else None,
    ),
)
_register(
    "div",
    np.divide,
    lambda g, out, a, b: (
        sum_to(div(g, b), a.shape) if _needs(a) else None,
        sum_to(neg(mul(g, div(out, b))), b.shape) if _needs(b) else None,
    ),
)
_register("neg", np.negative, lambda g, out, x: (neg(g),))


def relu(x) -> Tensor:
    return _apply("relu", (as_tensor(x),))


def tanh(x) -> Tensor:
    return _apply("tanh", (as_tensor(x),))


def exp(x) -> Tensor:
    return _apply("exp", (as_tensor(x),))


def log(x) -> Tensor:
    return _apply("log", (as_tensor(x),))


def abs_(x) -> Tensor:
    return _apply("abs", (as_tensor(x),))


def maximum(x, floor: float) -> Tensor:
    """Elementwise max against a constant; gradient 0 where clamped."""
    return _apply("maximum", (as_tensor(x),), floor=float(floor))


_register("relu", lambda x: np.maximum(x, 0.0), lambda g, out, x: (mul(g, Tensor(x.data > 0.0)),))
_register("tanh", np.tanh, lambda g, out, x: (mul(g, sub(1.0, mul(out, out))),))
_register("exp", np.exp, lambda g, out, x: (mul(g, out),))
_register("log", np.log, lambda g, out, x: (div(g, x),))
# subgradient 0 at exactly 0 (np.sign(0) == 0)
_register("abs", np.abs, lambda g, out, x: (mul(g, Tensor(np.sign(x.data))),))
_register(
    "maximum",
    lambda x, floor: np.maximum(x, floor),
    lambda g, out, x, floor: (mul(g, Tensor(x.data > floor)),),
)


# -- reductions and normalisers --------------------------------------------------


def _keep_shape(shape: tuple, axis) -> tuple:
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else axis
    axes = {a % len(shape) for a in axes}
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply("sum", (as_tensor(x),), axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply("mean", (as_tensor(x),), axis=axis, keepdims=keepdims)


def _sum_vjp(g, out, x, axis, keepdims):
    if not keepdims:
        g = reshape(g, _keep_shape(x.shape, axis))
    return (broadcast_to(g, x.shape),)


def _mean_vjp(g, out, x, axis, keepdims):
    n = x.size // max(out.size, 1)
    (gx,) = _sum_vjp(g, out, x, axis, keepdims)
    return (mul(gx, 1.0 / n),)


_register("sum", lambda x, axis, keepdims: np.sum(x, axis=axis, keepdims=keepdims), _sum_vjp)
_register("mean", lambda x, axis, keepdims: np.mean(x, axis=axis, keepdims=keepdims), _mean_vjp)


def _softmax_array(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_array(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(x, axis: int = -1) -> Tensor:
    return _apply("softmax", (as_tensor(x),), axis=axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    return _apply("log_softmax", (as_tensor(x),), axis=axis)


_register(
    "softmax",
    _softmax_array,
    lambda g, out, x, axis: (mul(out, sub(g, sum_(mul(g, out), axis=axis, keepdims=True))),),
)
_register(
    "log_softmax",
    _log_softmax_array,
    lambda g, out, x, axis: (sub(g, mul(exp(out), sum_(g, axis=axis, keepdims=True))),),
)


# -- linear algebra and shape ops ---------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _apply("matmul", (a, b))


def _flat2(t: Tensor) -> Tensor:
    return reshape(t, (-1, t.shape[-1]))


def _matmul_vjp(g, out, a, b):
    # a shared 2-D operand gets its gradient from one flattened product rather
    # than a stack of per-batch products summed afterwards
    ga = gb = None
    if _needs(a):
        ga = sum_to(matmul(g, b.swapaxes(-1, -2)), a.shape)
    if _needs(b):
        if b.ndim == 2 and a.ndim > 2:
            gb = matmul(_flat2(a).swapaxes(0, 1), _flat2(g))
        else:
            gb = sum_to(matmul(a.swapaxes(-1, -2), g), b.shape)
    return ga, gb


_register("matmul", np.matmul, _matmul_vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _apply("reshape", (x,), shape=shape)


_register(
    "reshape",
    lambda x, shape: x.reshape(shape),
    lambda g, out, x, shape: (reshape(g, x.shape),),
)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    return _apply("transpose", (x,), axes=tuple(axes))


_register(
    "transpose",
    lambda x, axes: np.transpose(x, axes),
    lambda g, out, x, axes: (transpose(g, tuple(np.argsort(axes))),),
)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return _apply("concat", tuple(as_tensor(t) for t in tensors), axis=axis)


def _concat_vjp(g, out, *xs, axis):
    grads = []
    start = 0
    ax = axis % g.ndim
    for x in xs:
        stop = start + x.shape[ax]
        if _needs(x):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(start, stop)
            grads.append(getitem(g, tuple(idx)))
        else:
            grads.append(None)
        start = stop
    return tuple(grads)


_register("concat", lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_vjp)


def _freeze_index(idx):
    # node attrs must be hashable-free but stable; arrays are kept as-is
    return idx


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    return _apply("getitem", (x,), idx=_freeze_index(idx))


def scatter(g, idx, shape) -> Tensor:
    """Adjoint of ``getitem``: place ``g`` into zeros of ``shape`` at ``idx`` (accumulating)."""
    return _apply("scatter", (as_tensor(g),), idx=idx, shape=tuple(shape))


def _scatter_array(g, idx, shape):
    out = np.zeros(shape)
    np.add.at(out, idx, g)
    return out


_register(
    "getitem",
    lambda x, idx: np.array(x[idx], dtype=np.float64),
    lambda g, out, x, idx: (scatter(g, idx, x.shape),),
)
_register("scatter", _scatter_array, lambda g, out, x, idx, shape: (getitem(g, idx),))


# -- differentiation ---------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        order.append(t)
        for inp in t.node.inputs:
            if inp.requires_grad and inp.node is not None and id(inp) not in seen:
                stack.append(inp)
    order.sort(key=lambda t: t.node.id, reverse=True)
    return order


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    seed: Tensor | np.ndarray | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` (contracted with ``seed``) w.r.t. ``inputs``.

    Without a seed the output must hold a single element. Inputs that the
    output does not depend on get zero gradients. With ``create_graph`` the
    backward computation is recorded so the result can be differentiated.
    """
    if seed is None:
        if output.size != 1:
            raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
        seed = Tensor(np.ones(output.shape))
    else:
        seed = as_tensor(seed)
        if seed.shape != output.shape:
            raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")
    grads: dict[int, Tensor] = {id(output): seed}
    wanted = {id(t) for t in inputs}
    with _enable_grad(create_graph):
        for t in _topo(output):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if id(t) in wanted:
                grads[id(t)] = g
            node = t.node
            vjp = _OPS[node.kind][1]
            parts = vjp(g, t, *node.inputs, **node.attrs)
            for inp, gi in zip(node.inputs, parts):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else add(prev, gi)
        return [grads.get(id(t)) if id(t) in grads else Tensor(np.zeros(t.shape)) for t in inputs]


def backward(output: Tensor, params: Iterable[Tensor] | dict | None = None) -> dict:
    """Accumulate d output / d param into ``param.grad`` and return them by name.

    ``params`` may be a name->tensor mapping, a sequence, or a :class:`Tape`
    (its registry is used). Parameters the output does not touch receive zeros.
    """
    if isinstance(params, Tape):
        params = params.params
    if params is None:
        raise ValueError("backward: no parameters given")
    if isinstance(params, dict):
        names, tensors = list(params.keys()), list(params.values())
    else:
        tensors = list(params)
        names = [t.name or str(i) for i, t in enumerate(tensors)]
    gs = grad(output, tensors)
    out = {}
    for name, t, g in zip(names, tensors, gs):
        t.grad = g if t.grad is None else Tensor(t.grad.data + g.data)
        out[name] = g
    return out
