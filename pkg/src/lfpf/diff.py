"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded on the innermost active :class:`Tape` (one stack per
thread). Outside a tape every operation is a plain numpy evaluation, so
forward values never depend on whether gradients are being tracked.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (w * w).sum()
    >>> backward(tape, y)
    >>> w.grad
    array([2., 2., 2.])
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, out, inputs, vjp, op):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def record(self, node: Node) -> None:
        for inp in node.inputs:
            # inputs are either leaves or outputs of earlier nodes
            assert inp.is_leaf or id(inp) in self._ids, "tape out of topological order"
        self.nodes.append(node)
        self._ids.add(id(node.out))

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, tensor: "Tensor") -> bool:
        return id(tensor) in self._ids


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """A float64 array with an optional gradient slot."""

    __array_priority__ = 1000

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.grad: np.ndarray | None = None
        self.name = name

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


def _emit(value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(value)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(Node(out, tuple(inputs), vjp, op))
    return out


# primitives ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _emit(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)), "div")


def power(a: Tensor, exponent: float) -> Tensor:
    av = a.value
    return _emit(av ** exponent, (a,),
                 lambda g: (g * exponent * av ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    av = a.value
    return _emit(np.log(av), (a,), lambda g: (g / av,), "log")


def sqrt(a: Tensor) -> Tensor:
    """Square root with a zero subgradient at 0."""
    out = np.sqrt(a.value)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _emit(out, (a,), vjp, "sqrt")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    av = a.value
    out = np.maximum(av, slope * av) if 0 <= slope <= 1 else np.where(av > 0, av, slope * av)
    return _emit(out, (a,), lambda g: (np.where(av > 0, g, slope * g),), "leaky_relu")


def maximum(a: Tensor, floor) -> Tensor:
    """Elementwise max against a constant floor (no gradient to the floor)."""
    floor = np.asarray(floor.value if isinstance(floor, Tensor) else floor, dtype=np.float64)
    av = a.value
    out = np.maximum(av, floor)
    passed = av >= floor
    return _emit(out, (a,), lambda g: (_unbroadcast(g * passed, av.shape),), "maximum")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2")
    av, bv = a.value, b.value

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit(av @ bv, (a, b), vjp, "matmul")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _emit(np.swapaxes(a.value, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit(a.value[index], (a,), vjp, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([t.value for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _emit(np.stack([t.value for t in tensors], axis=axis), tensors, vjp, "stack")


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _emit(np.broadcast_to(a.value, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, old),), "broadcast_to")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (a,), vjp, "softmax")


# composite layers ---------------------------------------------------------

def affine(x, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` over any leading batch dimensions of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != W.shape[0] or W.shape[1:] != b.shape:
        raise ValueError(f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    xv, Wv = x.value, W.value
    lead = xv.shape[:-1]
    flat = xv.reshape(-1, xv.shape[-1])  # one 2-D product instead of many tiny batched ones

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        return ((g2 @ Wv.T).reshape(xv.shape), flat.T @ g2, g2.sum(axis=0))

    out = (flat @ Wv + b.value).reshape(lead + (Wv.shape[1],))
    return _emit(out, (x, W, b), vjp, "affine")


def softmax_attention(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """Single-head scaled dot-product attention over the second-to-last axis."""
    if not (Q.shape == K.shape and K.shape[:-1] == V.shape[:-1]):
        raise ValueError(f"attention shape mismatch: Q{Q.shape} K{K.shape} V{V.shape}")
    scores = matmul(Q, K.T) * (1.0 / np.sqrt(Q.shape[-1]))
    return matmul(softmax(scores, axis=-1), V)


def backward(tape: Tape, output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every tracked leaf."""
    if output.value.size != 1:
        raise ValueError("backward needs a scalar output")
    if not output.requires_grad:
        return
    if output.is_leaf:
        output.grad = (output.grad if output.grad is not None else 0.0) + np.ones(output.shape)
        return
    if output not in tape:
        raise ValueError("output was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if not inp.requires_grad or gi is None:
                continue
            if inp.is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
