"""Parameterised building blocks: linear, layer norm, attention, encoder layer."""

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor, concat, default_dtype


@dataclass(frozen=True)
class TransformerLayerConfig:
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 1
    ffn_hidden: int = 0  # 0 means 4 * d_model
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")

    @property
    def hidden(self):
        return self.ffn_hidden or 4 * self.d_model


def xavier_uniform(rng, fan_in, fan_out):
    bound = (6.0 / (fan_in + fan_out)) ** 0.5
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Module:
    """Anything holding Parameters as attributes, possibly nested."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, bias=True):
        self.weight = Parameter(xavier_uniform(rng, fan_in, fan_out))
        self.bias = Parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over ``[..., L, d]`` inputs.

    Returns the projected output and the attention weights ``[..., heads, L, L]``.
    Keys where ``mask`` is false receive exactly zero weight.
    """

    def __init__(self, d_model, n_heads, rng):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)

    def _split(self, x):
        *lead, L, d = x.shape
        h = self.n_heads
        nd = len(lead)
        perm = tuple(range(nd)) + (nd + 1, nd, nd + 2)
        return x.reshape(*lead, L, h, d // h).transpose(*perm)

    def _dense(self, q, k, v):
        """Per-head softmax(q k^T / sqrt(dh)) v over ``[G, n, d]`` projections, no padding."""
        G, n, d = q.shape
        q, k, v = self._split(q), self._split(k), self._split(v)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d // self.n_heads))
        attn = F.masked_softmax(scores)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(G, n, d)
        return ctx, attn

    def __call__(self, x, mask):
        mask = np.asarray(mask, dtype=bool)
        d = x.shape[-1]
        if mask.all():
            F.record_attention(np.full(mask.shape[:-1], mask.shape[-1]))
            lead, L = x.shape[:-2], x.shape[-2]
            flat = x.reshape(-1, L, d)
            ctx, attn = self._dense(self.query(flat), self.key(flat), self.value(flat))
            out = self.out(ctx).reshape(x.shape)
            return out, Tensor(attn.data.reshape(*lead, self.n_heads, L, L), dtype=attn.dtype)
        valid = np.flatnonzero(mask.reshape(-1))
        rows = F.gather_rows(x.reshape(mask.size, d), valid)
        out, attn = self.forward_rows(rows, valid, mask)
        return F.scatter_rows(out, valid, mask.size).reshape(x.shape), attn

    def forward_rows(self, rows, valid_index, mask):
        """Attention where only the rows ``valid_index`` of the flattened input exist.

        ``rows`` holds those rows (n, d) in flattened order.  Sequences are
        grouped by their number of valid positions and attended densely, so
        padding never enters any reduction.  Weights of padded positions are 0.
        """
        mask = np.asarray(mask, dtype=bool)
        *lead, L = mask.shape
        m2 = mask.reshape(-1, L)
        counts = m2.sum(axis=1)
        if np.any(counts == 0):
            raise ValueError("attention mask has no attendable position")
        F.record_attention(counts)
        d = rows.shape[-1]
        h = self.n_heads
        q, k, v = self.query(rows), self.key(rows), self.value(rows)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        cols = np.asarray(valid_index) % L
        weights = np.zeros((m2.shape[0], h, L, L), dtype=rows.dtype)
        pieces, placed = [], []
        for c in np.unique(counts):
            seqs = np.flatnonzero(counts == c)
            idx = (starts[seqs][:, None] + np.arange(c)).reshape(-1)
            shape = (len(seqs), int(c), d)
            ctx, attn = self._dense(
                F.gather_rows(q, idx).reshape(shape),
                F.gather_rows(k, idx).reshape(shape),
                F.gather_rows(v, idx).reshape(shape),
            )
            pieces.append(ctx.reshape(len(seqs) * int(c), d))
            placed.append(idx)
            P = cols[idx].reshape(len(seqs), int(c))
            weights[seqs[:, None, None, None], np.arange(h)[None, :, None, None], P[:, None, :, None], P[:, None, None, :]] = attn.data
        ctx = pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)
        order = np.concatenate(placed)
        if not np.array_equal(order, np.arange(len(order))):
            inverse = np.empty_like(order)
            inverse[order] = np.arange(len(order))
            ctx = F.gather_rows(ctx, inverse)
        return self.out(ctx), Tensor(weights.reshape(*lead, h, L, L), dtype=rows.dtype)


class FeedForward(Module):
    def __init__(self, d_model, hidden, rng):
        self.up = Linear(d_model, hidden, rng)
        self.down = Linear(hidden, d_model, rng)

    def __call__(self, x):
        return self.down(F.gelu(self.up(x)))


class TransformerEncoderLayer(Module):
    """Pre-norm block: ``x + MHA(LN(x))`` then ``+ FFN(LN(.))``; padded rows zeroed."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.norm1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.hidden, rng)
        self._rng = rng

    def __call__(self, x, mask, training=False):
        mask = np.asarray(mask, dtype=bool)
        d = x.shape[-1]
        flat = mask.reshape(-1)
        if flat.all():
            a, weights = self.attn(self.norm1(x), mask)
            a = F.dropout(a, self.cfg.dropout_rate, self._rng, training)
            h = x + a
            f = F.dropout(self.ffn(self.norm2(h)), self.cfg.dropout_rate, self._rng, training)
            return h + f, weights
        # position-wise work only touches real rows; padded rows come out zero
        valid = np.flatnonzero(flat)
        xv = F.gather_rows(x.reshape(flat.size, d), valid)
        a, weights = self.attn.forward_rows(self.norm1(xv), valid, mask)
        a = F.dropout(a, self.cfg.dropout_rate, self._rng, training)
        h = xv + a
        f = F.dropout(self.ffn(self.norm2(h)), self.cfg.dropout_rate, self._rng, training)
        out = F.scatter_rows(h + f, valid, flat.size).reshape(x.shape)
        return out, weights


class TransformerEncoder(Module):
    """A stack of ``cfg.n_layers`` encoder layers; returns the last layer's attention."""

    def __init__(self, cfg, rng):
        self.layers = [TransformerEncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]

    def __call__(self, x, mask, training=False):
        weights = None
        for layer in self.layers:
            x, weights = layer(x, mask, training)
        return x, weights


def cast_parameters(module, dtype=None):
    dtype = dtype or default_dtype()
    for p in module.parameters():
        p.cast(dtype)
