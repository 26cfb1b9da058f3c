"""Dense float64 tensors with a reverse-mode gradient tape.

A :class:`Tape` records every primitive applied to tensors that belong to it.
Tensors built without a tape are plain constants: they never receive
gradients and mixing them into taped expressions is always allowed.

Typical use::

    tape = Tape()
    w = tape.leaf(np.ones(3))
    loss = (w * w).sum()
    grads = tape.backward(loss)
    grads[w]  # Tensor([2., 2., 2.])

Broadcasting is deliberately narrow: two operands must have identical
shapes, or one of them must be "all leading ones" followed by the other's
trailing shape (e.g. a bias of shape ``(n,)`` against ``(B, n)``).
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "concat",
    "reshape",
    "transpose",
    "slice_",
    "sum_",
    "mean",
    "neg",
    "exp",
    "log",
    "sqrt",
    "relu",
    "sigmoid",
    "softplus",
    "tanh",
    "gather",
    "scatter_add",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class Tensor:
    """An n-dimensional float64 array, optionally attached to a tape."""

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, tape: "Tape | None" = None, _node: int | None = None, _copy: bool = True):
        if _copy:
            self.data = np.array(data, dtype=np.float64)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = _node
        if tape is None:
            # tapeless tensors are immutable constants
            self.data.setflags(write=False)

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
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        taped = "" if self.tape is None else ", taped"
        return f"Tensor({np.array2string(self.data, precision=6)}{taped})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)


class _Node:
    __slots__ = ("parents", "backward", "shape")

    def __init__(self, parents, backward, shape):
        self.parents = parents  # list of node ids (None for constants)
        self.backward = backward  # grad_out -> list of grads, one per parent
        self.shape = shape


class Tape:
    """Append-only record of primitive operations.

    Nodes are stored in recording order, which is a valid topological order
    because an op can only consume tensors that already exist.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data) -> Tensor:
        """Register ``data`` as a differentiable input."""
        arr = np.array(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        node = len(self.nodes)
        self.nodes.append(_Node([], None, arr.shape))
        t = Tensor(arr, tape=self, _node=node)
        self.leaves.append(t)
        return t

    def _record(self, data: np.ndarray, parents, backward) -> Tensor:
        node = len(self.nodes)
        self.nodes.append(_Node(parents, backward, data.shape))
        return Tensor(data, tape=self, _node=node, _copy=False)

    def backward(self, loss: Tensor) -> dict[Tensor, Tensor]:
        """Gradients of the scalar ``loss`` with respect to every leaf.

        Leaves that ``loss`` does not depend on get zero gradients.
        """
        if loss.tape is not self:
            raise ValueError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node] = np.ones(loss.shape)
        for i in range(loss.node, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if p is None or pg is None:
                    continue
                if grads[p] is None:
                    grads[p] = pg
                else:
                    grads[p] = grads[p] + pg
        out = {}
        for leaf in self.leaves:
            g = grads[leaf.node]
            out[leaf] = Tensor(np.zeros(leaf.shape) if g is None else g)
        return out


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = t.tape
    return tape


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data, _copy=False)
    parents = [t.node if t.tape is tape else None for t in inputs]
    return tape._record(data, parents, backward)


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if _leading_ones_of(a, b):
        return b
    if _leading_ones_of(b, a):
        return a
    raise ShapeError(f"{op}: shapes {a} and {b} do not conform")


def _leading_ones_of(small: tuple, big: tuple) -> bool:
    """True when ``small`` is (1, ..., 1) + a trailing suffix of ``big``."""
    if len(small) > len(big):
        return False
    for k in range(len(small) + 1):
        head, tail = small[:k], small[k:]
        if all(s == 1 for s in head) and tail == big[len(big) - len(tail):]:
            return True
    return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, [a, b], lambda g: [_unbroadcast(g, sa), _unbroadcast(g, sb)])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, [a, b], lambda g: [_unbroadcast(g, sa), _unbroadcast(-g, sb)])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        [a, b],
        lambda g: [_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)],
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(
        out,
        [a, b],
        lambda g: [_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)],
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, [a], lambda g: [-g])


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D and 2-D operands (numpy semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: only 1-D/2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    a2 = ad.reshape(1, -1) if ad.ndim == 1 else ad
    b2 = bd.reshape(-1, 1) if bd.ndim == 1 else bd

    def backward(g):
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return [(g2 @ b2.T).reshape(ad.shape), (a2.T @ g2).reshape(bd.shape)]

    return _emit(ad @ bd, [a, b], backward)


# ---------------------------------------------------------------------------
# shape ops


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[u.shape for u in ts]} do not conform on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _emit(
        np.concatenate([t.data for t in ts], axis=ax),
        ts,
        lambda g: np.split(g, splits, axis=ax),
    )


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing: ints, slices, Ellipsis, None."""
    a = as_tensor(a)
    parts = index if isinstance(index, tuple) else (index,)
    for p in parts:
        if not (p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice))):
            raise TypeError("slice: use gather for array indices")
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[index] = g
        return [out]

    return _emit(a.data[index].copy(), [a], backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _emit(out.copy(), [a], lambda g: [g.reshape(old)])


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes).copy(), [a], lambda g: [np.transpose(g, inverse)])


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, shape).copy()]

    return _emit(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), [a], backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    count = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g / count, shape).copy()]

    return _emit(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), [a], backward)


# ---------------------------------------------------------------------------
# elementwise unary


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, [a], lambda g: [g * out])


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit(np.log(ad), [a], lambda g: [g / ad])


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit(out, [a], lambda g: [g * 0.5 / out])


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), [a], lambda g: [g * mask])


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit(out, [a], lambda g: [g * out * (1.0 - out)])


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    sig = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return _emit(out, [a], lambda g: [g * sig])


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, [a], lambda g: [g * (1.0 - out * out)])


# ---------------------------------------------------------------------------
# indexing along the leading axis


def _check_index(op: str, index: np.ndarray, n: int) -> np.ndarray:
    index = np.asarray(index)
    if index.dtype.kind not in "iu":
        raise TypeError(f"{op}: index must be integer, got {index.dtype}")
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"{op}: index out of range for leading extent {n}")
    return index


def gather(a, index, axis: int = 0) -> Tensor:
    """``np.take(a, index, axis)``; ``index`` is an integer array of any shape."""
    a = as_tensor(a)
    if a.ndim == 0:
        raise ShapeError("gather: operand must have at least one axis")
    ax = axis % a.ndim
    index = _check_index("gather", index, a.shape[ax])
    shape = a.shape
    where = (slice(None),) * ax + (index,)

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, where, g)
        return [out]

    return _emit(np.take(a.data, index, axis=ax), [a], backward)


def scatter_add(target, index, values) -> Tensor:
    """Copy of ``target`` with ``values[i]`` added into row ``index[i]``.

    Duplicate indices accumulate.
    """
    target, values = as_tensor(target), as_tensor(values)
    if target.ndim == 0:
        raise ShapeError("scatter_add: target must have at least one axis")
    index = _check_index("scatter_add", index, target.shape[0])
    expect = index.shape + target.shape[1:]
    if values.shape != expect:
        raise ShapeError(
            f"scatter_add: values shape {values.shape} does not match index+row shape {expect}"
        )
    out = target.data.copy()
    np.add.at(out, index, values.data)
    return _emit(out, [target, values], lambda g: [g, g[index]])
