"""Tensor with a reverse-mode gradient tape, plus the seeded PRNG state.

A :class:`Tensor` wraps a numpy array.  Ops in :mod:`advwb.ops` build new
tensors and attach a backward closure whenever one of their inputs requires
a gradient; if a :class:`Tape` is active the op output is also appended to
it, so the tape is topologically ordered by construction.

    >>> from advwb import ops
    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = ops.sum(x)
    >>> backward(y, tape)
    >>> x.grad
    array([1., 1., 1.], dtype=float32)
"""

import hashlib
from contextlib import contextmanager

import numpy as np

from .errors import GradientError

DEFAULT_DTYPE = np.float32

_TAPES = []
_GRAD_ENABLED = [True]


class Tensor:
    """Dense row-major array with an optional gradient buffer.

    ``dtype`` defaults to float32, except that float64 numpy input keeps
    its width (the 64-bit mode used by gradient checks).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the real work lives in advwb.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class Tape:
    """Ordered record of the differentiable ops executed while active."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


@contextmanager
def no_grad():
    """Run ops without building backward closures."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def make_node(data, parents, backward_fn):
    """Wrap an op result, linking it into the graph when a parent needs grad.

    ``backward_fn(grad)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        if _TAPES:
            _TAPES[-1].nodes.append(out)
    return out


def _topo_order(root):
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
        for p in node._parents:
            if p._backward is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, tape=None):
    """Populate ``.grad`` on every leaf tensor that requires a gradient.

    Gradients accumulate into existing buffers.  With a tape, leaves the
    tape touched but the loss does not depend on receive zero gradients.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is not None:
        order = tape.nodes
        for node in order:
            for p in node._parents:
                if p.requires_grad and p._backward is None and p.grad is None:
                    p.grad = np.zeros_like(p.data)
    else:
        order = _topo_order(loss)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                if p.grad is None:
                    p.grad = np.array(pg, dtype=p.data.dtype, copy=True).reshape(p.shape)
                else:
                    p.grad += pg
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class PrngState:
    """Seeded random stream: numpy PCG64 fed by a SeedSequence.

    The entropy is the tuple of non-negative integers given at construction
    (e.g. ``(seed, image_index)``), so a stream is a pure function of its
    key.  :meth:`child` derives an independent stream from this one's key
    without consuming draws from it.
    """

    def __init__(self, *key):
        if not key:
            key = (0,)
        self.key = tuple(int(k) for k in key)
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.key)))

    def child(self, *suffix):
        return PrngState(*self.key, *(_key_int(s) for s in suffix))

    def uniform(self, low, high, size, dtype=DEFAULT_DTYPE):
        return self.generator.uniform(low, high, size).astype(dtype)

    def random(self, size):
        return self.generator.random(size)

    def normal(self, size):
        return self.generator.standard_normal(size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f"PrngState{self.key}"


def _key_int(value):
    if isinstance(value, str):
        # stable across runs, unlike hash()
        return int.from_bytes(hashlib.sha256(value.encode("utf-8")).digest()[:8], "little")
    return int(value)
