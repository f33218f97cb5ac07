"""Reverse-mode autodiff on dense float32 numpy arrays.

A :class:`Tensor` wraps a float32 ndarray plus an optional gradient
buffer.  Every differentiable op links its output back to its inputs and
attaches a closure that pushes the output gradient one step backward;
:func:`backward` topologically sorts the recorded graph and runs those
closures in exact reverse order, accumulating (never overwriting) into
``grad`` so fan-out works.

Storage is float32 throughout; ops that reduce (losses, normalisation
statistics) accumulate in float64 internally and cast the result back.
"""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import InputError

_GRAD_ENABLED = [True]


def grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference-only forwards)."""
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = True


class Tensor:
    """A node in the compute graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backprop", "_prev", "_spent")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = ()):
        arr = np.asarray(data, dtype=np.float32)
        # ascontiguousarray would promote 0-d scalars to shape (1,).
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backprop = None
        self._prev = _prev
        self._spent = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise InputError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Light arithmetic sugar; the functional module holds the real ops.
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __sub__(self, other):
        from . import functional as F
        return F.add(self, F.mul(as_tensor(other), -1.0))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def accumulate_grad(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Add ``g`` into ``t.grad``, allocating on first touch.

    ``fresh`` marks ``g`` as exclusively owned by the caller (a newly
    allocated array, not a view of another tensor's gradient), letting
    the first accumulation adopt it instead of copying.
    """
    if g.shape != t.data.shape:
        raise InputError(f"gradient shape {g.shape} != data shape {t.data.shape}")
    if t.grad is None:
        if fresh and isinstance(g, np.ndarray) and g.dtype == np.float32:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=np.float32)
    else:
        t.grad += g


def _topo_order(root: Tensor) -> list:
    """Iterative post-order walk of the graph below ``root``."""
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
        for parent in node._prev:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate gradients of everything ``loss`` depends on.

    ``loss`` must be scalar.  Calling this twice on the same node is an
    error: the saved activations have been consumed and a silent second
    pass would double-count accumulated gradients.
    """
    if loss.data.size != 1:
        raise InputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._spent:
        raise RuntimeError("backward already ran on this graph")
    loss._spent = True

    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backprop is not None and node.grad is not None:
            node._backprop()
