"""Differentiable operations built on the kernel backend."""

from contextlib import contextmanager

import numpy as np

from . import backend
from .tensor import Tensor, as_tensor, index_add, make


def _rows_matmul(a, b):
    # BLAS takes a matrix-vector path for a single row, which rounds differently
    # from the matrix-matrix path; keep every row on the same path so a row's
    # result never depends on how many rows share the batch
    if a.shape[0] == 1:
        return (np.concatenate([a, a]) @ b)[:1]
    return a @ b


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = _rows_matmul(x2, weight.data)
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out.reshape(*lead, weight.shape[1]), parents, backward, "linear")


def gelu(x):
    """GELU, tanh approximation."""
    k = backend.kernels()
    flat = x.data.reshape(-1)
    out = k.gelu_forward(flat).reshape(x.shape)

    def backward(g):
        return (k.gelu_backward(flat, np.ascontiguousarray(g).reshape(-1)).reshape(x.shape),)

    return make(out, (x,), backward, "gelu")


def layer_norm(x, gamma, beta, eps=1e-5):
    k = backend.kernels()
    x2 = x.data.reshape(-1, x.shape[-1])
    y, xhat, rstd = k.layer_norm_forward(x2, gamma.data, beta.data, eps)

    def backward(g):
        gx, gg, gb = k.layer_norm_backward(np.ascontiguousarray(g).reshape(x2.shape), xhat, rstd, gamma.data)
        return gx.reshape(x.shape), gg, gb

    return make(y.reshape(x.shape), (x, gamma, beta), backward, "layer_norm")


def masked_softmax(x, key_mask=None):
    """Softmax over the last axis; ``key_mask`` false entries get zero weight.

    ``key_mask`` must broadcast to ``x.shape[:-2] + x.shape[-1:]``: one key
    mask per score matrix, shared by all of its query rows.  Rows with no
    admissible key come out as zeros.
    """
    k = backend.kernels()
    *lead, rows, cols = x.shape
    if cols == 0:
        raise ValueError("softmax over an empty axis")
    if key_mask is None:
        mask = np.ones((1, cols), dtype=np.uint8)
        groups = 1
        x3 = x.data.reshape(1, -1, cols)
    else:
        mask = np.broadcast_to(np.asarray(key_mask, dtype=np.uint8), (*lead, cols)).reshape(-1, cols)
        mask = np.ascontiguousarray(mask)
        groups = mask.shape[0]
        x3 = x.data.reshape(groups, rows, cols)
    y = k.masked_softmax_forward(x3, mask).reshape(x.shape)

    def backward(g):
        y2 = y.reshape(-1, cols)
        return (k.softmax_backward(y2, np.ascontiguousarray(g).reshape(-1, cols)).reshape(x.shape),)

    return make(y, (x,), backward, "softmax")


def softmax(x, axis=-1):
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    if x.ndim == 0:
        raise ValueError("softmax of a scalar")
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    if axis == x.ndim - 1:
        flat = x.reshape(1, -1, x.shape[-1]) if x.ndim != 2 else x
        return masked_softmax(flat).reshape(x.shape)
    perm = [i for i in range(x.ndim) if i != axis] + [axis]
    inv = list(np.argsort(perm))
    moved = x.transpose(*perm)
    return softmax(moved, -1).transpose(*inv)


def gather_rows(x, index):
    """``x[index]`` along the first axis; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        return (index_add(np.zeros_like(x.data), index, g),)

    return make(x.data[index], (x,), backward, "gather_rows")


def scatter_rows(x, index, n):
    """Place rows of ``x`` at distinct positions ``index`` of an all-zero (n, ...) tensor."""
    index = np.asarray(index, dtype=np.intp)
    out = np.zeros((n, *x.shape[1:]), dtype=x.dtype)
    out[index] = x.data

    def backward(g):
        return (np.ascontiguousarray(g[index]),)

    return make(out, (x,), backward, "scatter_rows")


def embedding_bag_mean(table, bags):
    """Mean of ``table`` rows for every bag of indices; empty bags give zeros."""
    lengths = np.fromiter((len(b) for b in bags), dtype=np.intp, count=len(bags))
    flat = np.fromiter((i for b in bags for i in b), dtype=np.intp, count=int(lengths.sum()))
    seg = np.repeat(np.arange(len(bags)), lengths)
    scale = np.zeros(len(bags), dtype=table.dtype)
    nz = lengths > 0
    scale[nz] = 1.0 / lengths[nz]
    out = np.zeros((len(bags), table.shape[1]), dtype=table.dtype)
    index_add(out, seg, table.data[flat])
    out *= scale[:, None]

    def backward(g):
        return (index_add(np.zeros_like(table.data), flat, (g * scale[:, None])[seg]),)

    return make(out, (table,), backward, "embedding_bag_mean")


def masked_mean(x, mask):
    """Mean over the second-to-last axis counting only rows where ``mask`` is true.

    Each mean is a sequential sum over that sequence's valid rows alone, so
    the result does not depend on how much padding surrounds it.
    """
    mask = np.asarray(mask, dtype=bool)
    *lead, L, d = x.shape
    m2 = np.broadcast_to(mask, (*lead, L)).reshape(-1, L)
    counts = m2.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("average pooling over a fully masked sequence")
    valid = np.flatnonzero(m2.reshape(-1))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rows = x.data.reshape(-1, d)[valid]
    scale = (1.0 / counts).astype(x.dtype)
    out = np.add.reduceat(rows, starts, axis=0) * scale[:, None]
    seg = np.repeat(np.arange(len(counts)), counts)

    def backward(g):
        full = np.zeros((m2.size, d), dtype=x.dtype)
        full[valid] = g.reshape(-1, d)[seg] * scale[seg, None]
        return (full.reshape(x.shape),)

    return make(out.reshape(*lead, d), (x,), backward, "masked_mean")


def binary_cross_entropy(prob, target, eps=1e-7, pos_weight=1.0):
    """Mean BCE with probabilities clamped to [eps, 1 - eps]."""
    y = np.asarray(target, dtype=prob.dtype).reshape(prob.shape)
    n = prob.data.size
    if n == 0:
        raise ValueError("binary cross-entropy over an empty batch")
    p = np.clip(prob.data, eps, 1.0 - eps)
    w = np.where(y > 0.5, pos_weight, 1.0).astype(prob.dtype)
    loss = -(w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))).sum() / n
    inside = (prob.data > eps) & (prob.data < 1.0 - eps)

    def backward(g):
        d = w * (-(y / p) + (1.0 - y) / (1.0 - p)) / n
        return (g * d * inside,)

    return make(np.asarray(loss, dtype=prob.dtype), (prob,), backward, "binary_cross_entropy")


def dropout(x, rate, rng, training=True):
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep, dtype=x.dtype)


def positional_encoding(length, dim, dtype=None):
    """Standard sinusoidal table of shape (length, dim)."""
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(0, dim, 2).astype(np.float64)
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe.astype(dtype or np.float32)


# -- attention-cost instrumentation ------------------------------------------------

_cell_counters = []


class AttentionCounter:
    """Counts query-key score entries over valid positions."""

    def __init__(self):
        self.cells = 0
        self.matrices = []

    def record(self, valid_lengths):
        for n in valid_lengths:
            n = int(n)
            self.cells += n * n
            self.matrices.append(n)


@contextmanager
def count_attention():
    counter = AttentionCounter()
    _cell_counters.append(counter)
    try:
        yield counter
    finally:
        _cell_counters.remove(counter)


def record_attention(valid_lengths):
    if _cell_counters:
        lengths = np.asarray(valid_lengths).reshape(-1)
        for c in _cell_counters:
            c.record(lengths)
