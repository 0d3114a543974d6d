"""Multi-field behavior encoding: hashed text, periodic time, scaled amount."""

import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .nn import functional as F
from .nn.layers import Linear, Module
from .nn.tensor import Parameter, Tensor, concat

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN_RE = re.compile(r"[^\W_]+")

# (cos, sin) pairs in this order; periods of month, day-of-month, weekday, hour
TIME_PERIODS = (("month", 12), ("day", 31), ("week", 7), ("hour", 24))
TIME_WIDTH = 2 * len(TIME_PERIODS)
FIELD_ORDER = ("description", "time", "amount")
TOKEN_INIT_STD = 0.02


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TokenVocab:
    hash_buckets: int = 8192
    token_dim: int = 64

    def __post_init__(self):
        if self.hash_buckets < 2:
            raise ConfigError("encode.hash_buckets must be >= 2")
        if self.token_dim < 1:
            raise ConfigError("encode.token_dim must be >= 1")


def fnv1a_64(data):
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=65536)
def _tokenize(text, buckets):
    return tuple(fnv1a_64(tok.encode("utf-8")) % buckets for tok in _TOKEN_RE.findall(text.lower()))


def tokenize_text(text, vocab):
    """Lowercase, split on whitespace/punctuation, FNV-1a hash each token into a bucket."""
    return list(_tokenize(text, vocab.hash_buckets))


def encode_text(text, vocab, table):
    """Mean of the token rows of ``table``; zeros for text without tokens."""
    return F.embedding_bag_mean(table, [tokenize_text(text, vocab)])[0]


def _calendar(ts):
    ts = np.asarray(ts, dtype=np.int64)
    days = ts // 86400
    hour = (ts % 86400) // 3600
    weekday = (days + 3) % 7  # 1970-01-01 was a Thursday; Monday = 0
    dt = days.astype("datetime64[D]")
    months = dt.astype("datetime64[M]")
    month = months.astype(np.int64) % 12
    dom = (dt - months).astype(np.int64)
    return month, dom, weekday, hour


def time_features(ts):
    """Periodic embedding of epoch seconds (UTC), shape ``ts.shape + (8,)``.

    Each calendar component t with period T maps to (cos 2πt/T, sin 2πt/T);
    month and day-of-month are zero-based.
    """
    comps = _calendar(ts)
    cols = []
    for value, (_, period) in zip(comps, TIME_PERIODS):
        angle = 2.0 * np.pi * value.astype(np.float64) / period
        cols.append(np.cos(angle))
        cols.append(np.sin(angle))
    return np.stack(cols, axis=-1)


def time_embed(ts):
    if ts < 0:
        raise ValueError("timestamp must be >= 0")
    return time_features(np.array([ts]))[0]


@dataclass(frozen=True)
class AmountStats:
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0 or not math.isfinite(self.sigma):
            raise ConfigError("amount scaling sigma must be > 0 (degenerate training amounts)")

    @classmethod
    def fit(cls, records):
        logs = np.array([math.log1p(b.amount) for r in records for b in r.behaviors], dtype=np.float64)
        if logs.size == 0:
            raise ConfigError("no training amounts to fit amount scaling")
        return cls(float(logs.mean()), float(logs.std()))

    def transform(self, amounts):
        return (np.log1p(np.asarray(amounts, dtype=np.float64)) - self.mu) / self.sigma


def amount_feature(amount, stats):
    return float(stats.transform(amount))


@dataclass(frozen=True)
class EncoderConfig:
    vocab: TokenVocab = TokenVocab()
    d_model: int = 128
    use_description: bool = True
    use_timing: bool = True
    use_amount: bool = True
    share_token_table: bool = True

    def __post_init__(self):
        if not (self.use_description or self.use_timing or self.use_amount):
            raise ConfigError("at least one behavior field must be enabled")

    @property
    def input_width(self):
        return (
            self.vocab.token_dim * self.use_description + TIME_WIDTH * self.use_timing + 1 * self.use_amount
        )

    @property
    def field_layout(self):
        widths = {"description": self.vocab.token_dim, "time": TIME_WIDTH, "amount": 1}
        enabled = {"description": self.use_description, "time": self.use_timing, "amount": self.use_amount}
        return [(name, widths[name]) for name in FIELD_ORDER if enabled[name]]


class BehaviorEncoder(Module):
    """Maps behaviors to d-dim embeddings and merchant names to d-dim text vectors.

    ``e = FC(concat(description, time, amount))`` with disabled fields omitted.
    Merchant names share the token table (unless configured otherwise) and
    have their own projection head.
    """

    def __init__(self, cfg, rng, stats=None):
        self.cfg = cfg
        v = cfg.vocab
        self.token_table = Parameter(rng.normal(0.0, TOKEN_INIT_STD, size=(v.hash_buckets, v.token_dim)))
        if not cfg.share_token_table:
            self.merchant_table = Parameter(rng.normal(0.0, TOKEN_INIT_STD, size=(v.hash_buckets, v.token_dim)))
        self.fusion = Linear(cfg.input_width, cfg.d_model, rng)
        self.merchant_head = Linear(v.token_dim, cfg.d_model, rng)
        # fitted on the training split before first use
        self.stats = stats

    def _text_vectors(self, texts, table):
        uniq = sorted(set(texts))
        pos = {t: i for i, t in enumerate(uniq)}
        bags = [tokenize_text(t, self.cfg.vocab) for t in uniq]
        vecs = F.embedding_bag_mean(table, bags)
        return F.gather_rows(vecs, [pos[t] for t in texts])

    def features(self, behaviors):
        """The concatenated (pre-projection) field features, shape (n, input_width)."""
        parts = []
        dtype = self.token_table.dtype
        if self.cfg.use_description:
            parts.append(self._text_vectors([b.description for b in behaviors], self.token_table))
        if self.cfg.use_timing:
            ts = np.array([b.timestamp for b in behaviors], dtype=np.int64)
            parts.append(Tensor(time_features(ts), dtype=dtype))
        if self.cfg.use_amount:
            if self.stats is None:
                raise ConfigError("amount scaling is not fitted; fit AmountStats on the training split first")
            amt = self.stats.transform([b.amount for b in behaviors])[:, None]
            parts.append(Tensor(amt, dtype=dtype))
        return parts[0] if len(parts) == 1 else concat(parts, axis=-1)

    def encode_behaviors(self, behaviors):
        return self.fusion(self.features(behaviors))

    def encode_merchants(self, names):
        table = self.token_table if self.cfg.share_token_table else self.merchant_table
        return self.merchant_head(self._text_vectors(list(names), table))


def encode_behavior(behavior, encoder):
    """Single-behavior convenience wrapper around :class:`BehaviorEncoder`."""
    return encoder.encode_behaviors([behavior])[0]
