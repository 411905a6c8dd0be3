"""Dense float32/complex64 tensor with a reverse-mode differentiation tape.

Every operation that participates in gradient flow records a tape node:
the output tensor keeps references to its parents and a backward callable
returning one gradient array per parent. ``Tensor.backward`` walks the
resulting DAG once, in reverse topological order.
"""

import contextlib

import numpy as np

from ..errors import UsageError

_grad_enabled = True
_real_dtype = np.float32
_complex_dtype = np.complex64


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / metrics)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def float64_shadow():
    """Run forward passes in float64 (verification aid).

    Inside the block newly built tensors coerce to float64/complex128 and
    the operations follow their input dtypes, so a forward evaluated here
    tracks the same function as the float32 engine without its rounding
    noise. Used by the gradient checker's finite differences; recording
    gradients inside the block is not supported.
    """
    global _real_dtype, _complex_dtype
    prev = (_real_dtype, _complex_dtype)
    _real_dtype, _complex_dtype = np.float64, np.complex128
    try:
        yield
    finally:
        _real_dtype, _complex_dtype = prev


def shadow_active():
    return _real_dtype == np.float64


def _coerce(data):
    arr = np.asarray(data)
    if np.iscomplexobj(arr):
        return np.asarray(arr, dtype=_complex_dtype)
    return np.asarray(arr, dtype=_real_dtype)


class Tensor:
    """N-dimensional value, optionally tracked for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    # Make numpy scalars defer to our reflected operators.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = _coerce(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents = ()
        self._backward = None

    @classmethod
    def from_op(cls, data, parents, op, backward):
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t.parents = tuple(parents)
            t._backward = backward
        else:
            t.requires_grad = False
            t.parents = ()
            t._backward = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_complex(self):
        return self.data.dtype.kind == "c"

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``.grad`` on every requires_grad leaf reachable from here."""
        if self.is_complex or self.data.size != 1:
            raise UsageError("backward requires a real scalar")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pid = id(p)
                grads[pid] = pg if pid not in grads else grads[pid] + pg

    # Arithmetic sugar; the real implementations live in functional.py.
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)
