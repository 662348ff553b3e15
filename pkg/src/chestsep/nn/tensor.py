"""Reverse-mode autodiff tensor.

A Tensor wraps a float32/float64 ndarray plus an optional gradient buffer.
Operations in chestsep.nn.functional record a backward closure on each result;
backward() replays the tape in reverse topological order. Every op output is
checked for NaN/Inf so numerical blowups fail loudly at the op that produced
them rather than three modules later.
"""

import numpy as np

from ..errors import NonFiniteError

_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class no_grad:
    """Context manager that disables tape recording (inference / validation)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def guard_finite(arr: np.ndarray, context: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {context}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        guard_finite(arr, name or "tensor constructor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad}{tag})"

    # -- gradient bookkeeping ---------------------------------------------
    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this node; seeds with ones for a scalar root."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar root")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.accumulate_grad(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                guard_finite(g, "backward pass")
                parent.accumulate_grad(g)

    # -- a little operator sugar (full op set lives in functional) --------
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other)

    def __mul__(self, other):
        from . import functional as F

        return F.mul(self, other)

    def __sub__(self, other):
        from . import functional as F

        return F.add(self, F.scale(other, -1.0))

    def __neg__(self):
        from . import functional as F

        return F.scale(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F

        return F.matmul(self, other)


def _topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def make_result(data: np.ndarray, parents, backward_fn, op_name: str) -> Tensor:
    """Wrap an op result, attaching the tape entry when gradients are live."""
    guard_finite(data, op_name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out
