"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation builds its output through :func:`make_result`,
which attaches a :class:`Node` holding the input tensors and a closure that
maps the output gradient to input gradients. Node ids come from a global
monotone counter, so sorting the reachable nodes by id yields a valid
topological order; :class:`Tape` is exactly that ordered list.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphStateError, ShapeError

_state = {
    "dtype": np.dtype(np.float32),
    "grad_enabled": True,
    "detect_anomaly": False,
}
_ids = itertools.count()


def default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (e.g. float64 for gradient checks)."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


@contextlib.contextmanager
def detect_anomaly():
    """Raise ``FloatingPointError`` as soon as any op produces NaN or Inf."""
    old = _state["detect_anomaly"]
    _state["detect_anomaly"] = True
    try:
        yield
    finally:
        _state["detect_anomaly"] = old


def grad_enabled() -> bool:
    return _state["grad_enabled"]


class Node:
    __slots__ = ("id", "inputs", "backward", "op", "freed")

    def __init__(self, inputs: tuple, backward: Callable, op: str):
        self.id = next(_ids)
        self.inputs = inputs
        self.backward = backward
        self.op = op
        self.freed = False


class Tensor:
    """N-dimensional array that records the operations producing it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        # Python literals take the default dtype; float arrays keep theirs.
        if isinstance(data, (list, tuple, int, float)) or not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node: Node | None = None
        self._retain = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> int | None:
        return None if self._node is None else self._node.id

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        dtype = np.dtype(dtype)
        src = self.dtype

        def backward(g):
            return (g.astype(src),)

        return make_result(self.data.astype(dtype), (self,), backward, "astype")

    def retain_grad(self) -> "Tensor":
        """Keep ``.grad`` on this non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, reciprocal(as_tensor(other, like=self)))

    def __rtruediv__(self, other):
        return mul(as_tensor(other, like=self), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(value, dtype=dtype))


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op, recording a node if any input needs grad."""
    if _state["detect_anomaly"] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    needs = _state["grad_enabled"] and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._node = Node(tuple(inputs), backward, op)
    return out


class Tape:
    """Operations reachable from an output, in recording order."""

    def __init__(self, nodes: list[Node], tensors: list[Tensor]):
        self.nodes = nodes
        self._tensors = tensors

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t._node.inputs)
        found.sort(key=lambda t: t._node.id)
        return cls([t._node for t in found], found)

    def __len__(self) -> int:
        return len(self.nodes)

    def is_topological(self) -> bool:
        position = {n.id: i for i, n in enumerate(self.nodes)}
        for i, node in enumerate(self.nodes):
            for inp in node.inputs:
                if inp._node is not None and position.get(inp._node.id, -1) >= i:
                    return False
        return True

    def replay(self, seed_grad: np.ndarray, retain_graph: bool = False) -> int:
        """Propagate ``seed_grad`` from the last node back to the leaves.

        Returns the number of nodes visited.
        """
        if not self._tensors:
            return 0
        grads: dict[int, np.ndarray] = {id(self._tensors[-1]): seed_grad}
        visited = 0
        for t in reversed(self._tensors):
            node = t._node
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if node.freed:
                raise GraphStateError(
                    "graph already freed by a previous backward; re-run forward or pass retain_graph=True"
                )
            if t._retain:
                t.grad = g.copy() if t.grad is None else t.grad + g
            visited += 1
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                if inp._node is None:
                    inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi
            if not retain_graph:
                node.freed = True
                node.backward = None
        return visited


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf ``t`` with ``requires_grad``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if loss._node.freed:
        raise GraphStateError("graph already freed by a previous backward; re-run forward or pass retain_graph=True")
    Tape.from_output(loss).replay(seed, retain_graph=retain_graph)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- elementwise and reduction primitives ---------------------------------

def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach it from ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def backward(g):
        return (-g * out * out,)

    return make_result(out, (a,), backward, "reciprocal")


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data

    def backward(g):
        return (g * exponent * x ** (exponent - 1),)

    return make_result(x**exponent, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return make_result(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; gradient goes to the first maximal element."""
    x = a.data
    axes = _norm_axes(axis, a.ndim)
    # Move reduced axes last and flatten them so argmax picks a single winner.
    keep = [i for i in range(x.ndim) if i not in axes]
    moved = np.transpose(x, keep + list(axes))
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    idx = flat.argmax(axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = np.expand_dims(vals, axes) if keepdims else vals

    def backward(g):
        if keepdims:
            g = g.reshape(vals.shape)
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(keep + list(axes))),)

    return make_result(np.asarray(out), (a,), backward, "max")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(a.data[index]), (a,), backward, "getitem")
