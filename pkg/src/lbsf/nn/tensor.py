"""Dense tensors with reverse-mode automatic differentiation.

Compute is float32 by default.  Check mode (float64) is enabled either with
``LBSF_CHECK_MODE=1`` in the environment or with :func:`precision`; it exists
for finite-difference gradient verification.

Every operation verifies that its result is finite and raises
:class:`NumericError` naming the operation otherwise.
"""

import itertools
import os
from contextlib import contextmanager

import numpy as np

_default_dtype = np.float64 if os.environ.get("LBSF_CHECK_MODE", "") == "1" else np.float32
_grad_enabled = True
_ids = itertools.count()


class NumericError(FloatingPointError):
    """A non-finite value was produced by the named operation."""

    def __init__(self, op):
        super().__init__(f"non-finite value produced by {op}")
        self.op = op


def default_dtype():
    return _default_dtype


def check_mode():
    return _default_dtype == np.float64


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


def _check_finite(arr, op):
    # a finite sum implies every entry is finite
    if arr.dtype.kind == "f" and arr.size and not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NumericError(op)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._id = next(_ids)
        self.op = "leaf"

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    # -- graph construction -------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that needs it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if not self.requires_grad:
            return
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        # consumers always have larger ids than their inputs
        pending = {self._id: grad}
        for node in sorted(nodes.values(), key=lambda n: n._id, reverse=True):
            g = pending.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = pending.get(parent._id)
                pending[parent._id] = pg if prev is None else prev + pg

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(-self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by its reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis, keepdims) * (1.0 / n)


class Parameter(Tensor):
    """A named, optionally trainable tensor owned by a model."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name="", trainable=True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"

    def cast(self, dtype):
        self.data = self.data.astype(dtype)
        self.grad = None


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def make(data, parents, backward, op):
    """Wrap ``data`` as the result of ``op`` applied to ``parents``."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_ids)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- elementwise and structural ops ---------------------------------------------


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return make(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b):
    """``a @ b`` with numpy broadcasting over leading dimensions."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            bd = b.data if b.ndim > 1 else b.data[None, :]
            gg = g if b.ndim > 1 else g[..., None]
            ga = unbroadcast(gg @ np.swapaxes(bd, -1, -2), a.shape)
        if b.requires_grad:
            ad = a.data if a.ndim > 1 else a.data[None, :]
            gg = g if a.ndim > 1 else g[..., None, :]
            if b.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ gg.reshape(-1, gg.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ gg, b.shape)
        return ga, gb

    return make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def reshape(x, shape):
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return make(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return make(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward, "transpose")


def index_add(target, index, values):
    """``target[index] += values`` along axis 0, accumulating repeated indices.

    Deterministic: repeated indices are summed in stable sorted order.
    """
    index = np.asarray(index).reshape(-1)
    if index.size == 0:
        return target
    order = np.argsort(index, kind="stable")
    sidx = index[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    if starts.size == index.size:
        target[index] += values
        return target
    target[sidx[starts]] += np.add.reduceat(values[order], starts, axis=0)
    return target


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(x, idx):
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make(np.ascontiguousarray(x.data[idx]), (x,), backward, "getitem")


def tsum(x, axis=None, keepdims=False):
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return make(out, (x,), backward, "exp")


def log(x):
    def backward(g):
        return (g / x.data,)

    return make(np.log(x.data), (x,), backward, "log")


def sigmoid(x):
    # split by sign so neither branch overflows
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make(out, (x,), backward, "sigmoid")


def tanh(x):
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return make(out, (x,), backward, "tanh")
