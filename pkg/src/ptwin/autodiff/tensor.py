"""Dense tensors with a recorded operation tape for reverse-mode differentiation.

Storage is float32 by default; every op preserves the dtype of its operands, so
a graph built from float64 leaves runs entirely in float64 (used for gradient
checking). Reductions always accumulate in float64.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ContractError, ShapeError

_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One recorded operation: how to map the output gradient onto each input."""

    __slots__ = ("op", "parents", "backward_fn", "seq")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = next(_seq)


def _as_array(data, dtype=None) -> np.ndarray:
    # numpy scalars (0-d results of arithmetic) keep their precision as well
    if isinstance(data, (np.ndarray, np.generic)) and dtype is None:
        if data.dtype in (np.float32, np.float64):
            return np.asarray(data)
        return np.asarray(data, dtype=np.float32)
    return np.asarray(data, dtype=dtype or np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        src_dtype = self.dtype
        return _record(
            "astype", self.data.astype(dtype), (self,),
            lambda g: (g.astype(src_dtype),))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)

    # -- arithmetic ---------------------------------------------------------
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
        return _record("neg", -self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- shape and reductions -----------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Optional[np.ndarray] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _record(op: str, out: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    result = Tensor(out)
    if _grad_enabled and any(p.requires_grad for p in parents):
        result.requires_grad = True
        result.node = Node(op, parents, backward_fn)
    return result


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64).astype(grad.dtype)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64).astype(grad.dtype)
    return grad.reshape(shape)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, getattr(b, "data", None))
    b = _lift(b, a.data)
    return _record(
        "add", a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _lift(a, getattr(b, "data", None))
    b = _lift(b, a.data)
    return _record(
        "sub", a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _lift(a, getattr(b, "data", None))
    b = _lift(b, a.data)
    return _record(
        "mul", a.data * b.data, (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = _lift(a, getattr(b, "data", None))
    b = _lift(b, a.data)
    out = a.data / b.data

    def backward_fn(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _record("div", out, (a, b), backward_fn)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _record(
        "pow", out, (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a = _lift(a)
    b = _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", out, (a, b), backward_fn)


# -- shape manipulation ----------------------------------------------------------

def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Optional[tuple] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(
        "transpose", np.transpose(a.data, axes), (a,),
        lambda g: (np.transpose(g, inverse),))


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    out = np.broadcast_to(a.data, shape)
    return _record("broadcast", out, (a,), lambda g: (unbroadcast(g, src),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    if isinstance(out, np.ndarray) and out.base is not None:
        out = out.copy()

    basic = _is_basic_index(index)

    def backward_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record("getitem", np.asarray(out), (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tuple(tensors), backward_fn)


# -- reductions ------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    src = a.shape

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(g.dtype),)

    return _record("sum", np.asarray(out), (a,), backward_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# -- backward pass -----------------------------------------------------------------

@dataclass
class TapeEntry:
    op: str
    input_ids: tuple
    output_id: int
    node: Node = field(repr=False)


class Tape:
    """Topologically ordered list of the operations reachable from an output.

    Entries appear in recording order, so every input precedes the operations
    that consume it; the backward pass visits them in exact reverse order.
    """

    def __init__(self, entries: list, tensors: dict):
        self.entries = entries
        self._tensors = tensors

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        tensors = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in tensors:
                continue
            tensors[id(t)] = t
            if t.node is not None:
                stack.extend(t.node.parents)
        recorded = sorted(
            (t for t in tensors.values() if t.node is not None),
            key=lambda t: t.node.seq)
        entries = [
            TapeEntry(t.node.op, tuple(id(p) for p in t.node.parents), id(t), t.node)
            for t in recorded
        ]
        return cls(entries, tensors)

    def __len__(self) -> int:
        return len(self.entries)

    def tensor(self, tid: int) -> Tensor:
        return self._tensors[tid]


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Gradients add onto whatever is already stored; call ``zero_grad`` between
    optimisation steps.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones(loss.shape, dtype=loss.dtype)
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if loss.node is None:
        loss.grad = grad.copy() if loss.grad is None else loss.grad + grad
        return

    tape = Tape.from_output(loss)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output_id, None)
        if g is None:
            continue
        parent_grads = entry.node.backward_fn(g)
        for pid, pg in zip(entry.input_ids, parent_grads):
            if pg is None:
                continue
            parent = tape.tensor(pid)
            if not parent.requires_grad:
                continue
            if parent.node is None:
                pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
