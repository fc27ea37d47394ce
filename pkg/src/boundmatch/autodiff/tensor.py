"""Dense float32 tensors with reverse-mode automatic differentiation.

The operator set is deliberately minimal: exactly what a small segmentation
network needs. Every op records its parents and a backward closure; calling
``backward()`` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients (summing over repeated uses).

Broadcasting is restricted to scalar-vs-tensor and identical shapes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class NumericsError(FloatingPointError):
    """Raised when an operation produces or detects non-finite values."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (forward still runs)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


# A backward closure maps the output gradient to per-parent gradients
# (None for parents that need no gradient).
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------------
    def detach(self) -> "Tensor":
        """A view of the same data, cut from the graph."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t.op = "detach"
        t._parents = ()
        t._backward = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-topological gradient accumulation from a scalar loss."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )
        topo = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float32)
                if pg.shape != parent.data.shape:
                    # only the scalar-broadcast case reaches here
                    pg = np.asarray(pg.sum(dtype=np.float64), dtype=np.float32).reshape(
                        parent.data.shape
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _toposort(root: Tensor) -> list:
    """Iterative DFS topological order (parents before children)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.float32(x))


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: BackwardFn,
    op: str,
) -> Tensor:
    """Wrap op output; record the graph edge only when gradients can flow."""
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    t = Tensor(data, requires_grad=needs, op=op)
    if needs:
        t._parents = tuple(parents)
        t._backward = backward
    return t


def _check_binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(
        f"{op}: unsupported broadcast between shapes {a.shape} and {b.shape} "
        "(only scalar-vs-tensor and identical shapes)"
    )


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(dtype=np.float64), dtype=np.float32).reshape(shape)


# -- elementwise ---------------------------------------------------------------

ScalarOrTensor = Union[float, int, Tensor]


def add(a: ScalarOrTensor, b: ScalarOrTensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary_shapes(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make_op(a.data + b.data, (a, b), backward, "add")


def sub(a: ScalarOrTensor, b: ScalarOrTensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary_shapes(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return make_op(a.data - b.data, (a, b), backward, "sub")


def mul(a: ScalarOrTensor, b: ScalarOrTensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_op(ad * bd, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_op(np.where(mask, x.data, np.float32(0)), (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # stable two-sided formulation
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_op(out, (x,), backward, "sigmoid")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def backward(g):
        return (g * sign,)

    return make_op(np.abs(x.data), (x,), backward, "abs")


def log(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (g / xd,)

    return make_op(np.log(xd), (x,), backward, "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data > lo) & (x.data < hi)

    def backward(g):
        return (g * mask,)

    return make_op(np.clip(x.data, lo, hi), (x,), backward, "clip")


def elementwise(name: str, *operands) -> Tensor:
    """Dispatch by op name; the named subset mirrors the model's needs."""
    table = {
        "relu": relu,
        "sigmoid": sigmoid,
        "abs": abs_,
        "add": add,
        "mul": mul,
        "sub": sub,
        "log": log,
    }
    if name not in table:
        raise ValueError(f"elementwise: unknown op {name!r}")
    return table[name](*operands)


# -- reductions -----------------------------------------------------------------


def sum_(x: Tensor) -> Tensor:
    # accumulate in float64, store float32
    total = np.float32(x.data.sum(dtype=np.float64))

    def backward(g):
        return (np.full_like(x.data, g.reshape(-1)[0]),)

    return make_op(np.asarray(total), (x,), backward, "sum")


def mean_(x: Tensor) -> Tensor:
    return mul(sum_(x), 1.0 / x.data.size)


def channel_max(x: Tensor) -> Tensor:
    """Max over the channel axis of an NCHW tensor, keepdims.

    Gradient routes to the lowest-index argmax channel (deterministic ties).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"channel_max: expected NCHW, got shape {x.shape}")
    mx = x.data.max(axis=1, keepdims=True)
    hit = x.data == mx
    first = hit & (np.cumsum(hit, axis=1) == 1)

    def backward(g):
        return (g * first,)

    return make_op(mx, (x,), backward, "channel_max")


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel distribution over the channel axis (max-subtracted)."""
    if x.data.ndim != 4:
        raise ShapeError(f"softmax_channels: expected NCHW, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return make_op(s, (x,), backward, "softmax_channels")
