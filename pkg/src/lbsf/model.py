"""The LBSF forward pass and its flat (no-folding) ablation."""

from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache

import numpy as np

from .encoding import BehaviorEncoder, EncoderConfig, TokenVocab
from .folding import FoldConfig, fold_many, fold_sequence
from .nn import functional as F
from .nn.layers import Linear, Module, TransformerEncoder, TransformerLayerConfig
from .nn.tensor import Parameter, Tensor, concat, no_grad, sigmoid

# sequences are encoded in chunks of at most this many padded score cells
_CHUNK_CELLS = 1 << 21


@dataclass(frozen=True)
class AblationFlags:
    use_merchant_folding: bool = True
    use_amount: bool = True
    use_timing: bool = True
    use_description: bool = True

    def __post_init__(self):
        if not (self.use_amount or self.use_timing or self.use_description):
            raise ValueError("at least one behavior field must stay enabled")


@dataclass(frozen=True)
class ModelConfig:
    M: int = 74
    L_max: int = 128
    hash_buckets: int = 8192
    token_dim: int = 64
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 1
    ffn_hidden: int = 0
    dropout_rate: float = 0.0
    use_merchant_folding: bool = True
    use_amount: bool = True
    use_timing: bool = True
    use_description: bool = True
    merchant_pos_enc: bool = False
    share_token_table: bool = True
    seed: int = 0

    def __post_init__(self):
        # building the sub-configs runs their validation
        self.ablation
        self.fold
        self.layer
        self.encoder
        if self.d_model % 2:
            raise ValueError("d_model must be even")

    @property
    def ablation(self):
        return AblationFlags(self.use_merchant_folding, self.use_amount, self.use_timing, self.use_description)

    @property
    def fold(self):
        return FoldConfig(self.M, self.L_max)

    @property
    def layer(self):
        return TransformerLayerConfig(self.d_model, self.n_heads, self.n_layers, self.ffn_hidden, self.dropout_rate)

    @property
    def encoder(self):
        return EncoderConfig(
            TokenVocab(self.hash_buckets, self.token_dim),
            self.d_model,
            self.use_description,
            self.use_timing,
            self.use_amount,
            self.share_token_table,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardTrace:
    """Everything one user's forward pass exposes.

    ``merchant_attention`` is (heads, M): the CLS query's weights over merchant
    slots with its self-weight renormalised out (empty for the flat path).
    """

    user_id: str
    scorable: bool
    logit: float | None = None
    probability: float | None = None
    merchants: tuple = ()
    merchant_embeddings: np.ndarray | None = field(default=None, repr=False)
    enhanced_embeddings: np.ndarray | None = field(default=None, repr=False)
    merchant_attention: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)), repr=False)


@lru_cache(maxsize=64)
def _pe(length, dim, dtype):
    return F.positional_encoding(length, dim, np.dtype(dtype))


class MLPHead(Module):
    """d -> d/2 -> 1 with GELU."""

    def __init__(self, d, rng):
        self.hidden = Linear(d, d // 2, rng)
        self.out = Linear(d // 2, 1, rng)

    def __call__(self, x):
        return self.out(F.gelu(self.hidden(x)))


class LbsfModel(Module):
    def __init__(self, cfg=None, stats=None):
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(self.cfg.seed)
        d = self.cfg.d_model
        layer_cfg = self.cfg.layer
        self.encoder = BehaviorEncoder(self.cfg.encoder, rng, stats)
        self.within = TransformerEncoder(layer_cfg, rng)
        if self.cfg.use_merchant_folding:
            self.merchant_fusion = Linear(2 * d, d, rng)
            self.across = TransformerEncoder(layer_cfg, rng)
            self.cls = Parameter(rng.normal(0.0, 0.02, size=d))
            self.relational = TransformerEncoder(layer_cfg, rng)
        self.classifier = MLPHead(d, rng)
        self._dropout_rng = rng
        for name, p in self.named_parameters():
            p.name = name

    # -- configuration helpers ----------------------------------------------------

    @property
    def stats(self):
        return self.encoder.stats

    @stats.setter
    def stats(self, value):
        self.encoder.stats = value

    def fold(self, record):
        return fold_sequence(record, self.cfg.fold)

    def fold_many(self, records, workers=1):
        return fold_many(records, self.cfg.fold, workers)

    def parameter_dict(self):
        return dict(self.named_parameters())

    # -- stages ---------------------------------------------------------------------

    def _meld_sequences(self, rows, index_lists, transformer, training):
        """Transformer + masked average pooling over variable-length row sequences.

        ``rows`` is (N, d); each entry of ``index_lists`` selects the rows of one
        sequence.  Sequences run in length-sorted chunks; output is (K, d) in
        input order.
        """
        d = rows.shape[-1]
        lengths = np.array([len(ix) for ix in index_lists])
        order = np.argsort(lengths, kind="stable")
        padded = concat([rows, Tensor(np.zeros((1, d)), dtype=rows.dtype)], axis=0)
        pad_row = rows.shape[0]
        pooled, placed = [], []
        start = 0
        while start < len(order):
            L = int(lengths[order[start]])
            stop = start + 1
            while stop < len(order):
                L_next = int(lengths[order[stop]])
                if (stop + 1 - start) * L_next * L_next > _CHUNK_CELLS:
                    break
                L = L_next
                stop += 1
            chunk = order[start:stop]
            L = int(lengths[chunk].max())
            idx = np.full((len(chunk), L), pad_row, dtype=np.intp)
            for r, k in enumerate(chunk):
                idx[r, : lengths[k]] = index_lists[k]
            mask = idx != pad_row
            x = F.gather_rows(padded, idx.reshape(-1)).reshape(len(chunk), L, d)
            x = x + Tensor(_pe(L, d, rows.dtype.str) * mask[..., None], dtype=rows.dtype)
            h, _ = transformer(x, mask, training)
            pooled.append(F.masked_mean(h, mask))
            placed.append(chunk)
            start = stop
        stacked = pooled[0] if len(pooled) == 1 else concat(pooled, axis=0)
        inverse = np.empty(len(order), dtype=np.intp)
        inverse[np.concatenate(placed)] = np.arange(len(order))
        return F.gather_rows(stacked, inverse)

    def fuse_merchant_text(self, h, m_text):
        return F.gelu(self.merchant_fusion(concat([h, m_text], axis=-1)))

    def meld_across_merchants(self, H, merchant_mask, training=False):
        mask = np.asarray(merchant_mask, dtype=bool)
        if self.cfg.merchant_pos_enc:
            M, d = H.shape[-2:]
            H = H + Tensor(_pe(M, d, H.dtype.str) * mask[..., None], dtype=H.dtype)
        out, _ = self.across(H, mask, training)
        return out

    def relational_learning_cls(self, H, merchant_mask, training=False):
        """Prepend CLS, run the relational layer; return (u, attention over merchants)."""
        mask = np.asarray(merchant_mask, dtype=bool)
        *lead, M, d = H.shape
        cls = Tensor(np.zeros((*lead, 1, d)), dtype=H.dtype) + self.cls
        seq = concat([cls, H], axis=-2)
        full_mask = np.concatenate([np.ones((*lead, 1), dtype=bool), mask], axis=-1)
        out, attn = self.relational(seq, full_mask, training)
        u = out[..., 0, :]
        w = attn.data[..., 0, 1:].astype(np.float64)
        w = w / w.sum(axis=-1, keepdims=True)
        return u, w

    # -- batched forward -------------------------------------------------------------

    def forward(self, folded, training=False):
        """Score a list of FoldedUsers.

        Returns ``(logits, positions, extras)`` where ``logits`` is a Tensor over
        the scorable users, ``positions`` their indices in ``folded`` and
        ``extras`` intermediate arrays for trace building.
        """
        if not self.cfg.use_merchant_folding:
            return self._forward_flat(folded, training)
        d = self.cfg.d_model
        scorable = [i for i, f in enumerate(folded) if f.n_active > 0]
        if not scorable:
            return None, [], {}
        M = max(folded[i].M for i in scorable)
        behaviors, index_lists, slot_pos, names = [], [], [], []
        merchant_mask = np.zeros((len(scorable), M), dtype=bool)
        for b, i in enumerate(scorable):
            for j, slot in enumerate(folded[i].slots):
                if slot.merchant is None:
                    continue
                start = len(behaviors)
                behaviors.extend(slot.behaviors)
                index_lists.append(np.arange(start, start + len(slot.behaviors)))
                slot_pos.append(b * M + j)
                names.append(slot.merchant)
                merchant_mask[b, j] = True
        E = self.encoder.encode_behaviors(behaviors)
        h = self._meld_sequences(E, index_lists, self.within, training)
        h = self.fuse_merchant_text(h, self.encoder.encode_merchants(names))
        H = F.scatter_rows(h, slot_pos, len(scorable) * M).reshape(len(scorable), M, d)
        H2 = self.meld_across_merchants(H, merchant_mask, training)
        u, attn = self.relational_learning_cls(H2, merchant_mask, training)
        logits = self.classifier(u).reshape(len(scorable))
        extras = {"H": H.data, "H2": H2.data, "attn": attn, "mask": merchant_mask}
        return logits, scorable, extras

    def _flat_sequences(self, folded):
        return [f.behaviors() for f in folded]

    def _forward_flat(self, folded, training=False):
        seqs = self._flat_sequences(folded)
        scorable = [i for i, s in enumerate(seqs) if s]
        if not scorable:
            return None, [], {}
        behaviors, index_lists = [], []
        for i in scorable:
            start = len(behaviors)
            behaviors.extend(seqs[i])
            index_lists.append(np.arange(start, start + len(seqs[i])))
        E = self.encoder.encode_behaviors(behaviors)
        u = self._meld_sequences(E, index_lists, self.within, training)
        logits = self.classifier(u).reshape(len(scorable))
        return logits, scorable, {}

    def traces(self, folded):
        with no_grad():
            logits, scorable, extras = self.forward(folded)
        out = [ForwardTrace(f.user_id, False, merchants=tuple(s.merchant for s in f.slots)) for f in folded]
        if logits is None:
            return out
        probs = sigmoid(logits).data
        for b, i in enumerate(scorable):
            t = out[i]
            t.scorable = True
            t.logit = float(logits.data[b])
            t.probability = float(probs[b])
            if extras:
                M = folded[i].M
                t.merchant_embeddings = extras["H"][b, :M].copy()
                t.enhanced_embeddings = extras["H2"][b, :M].copy()
                t.merchant_attention = extras["attn"][b, :, :M].copy()
        return out

    def predict_proba(self, folded):
        """Probabilities aligned with ``folded``; NaN for unscorable users."""
        with no_grad():
            logits, scorable, _ = self.forward(folded)
        out = np.full(len(folded), np.nan)
        if logits is not None:
            out[scorable] = sigmoid(logits).data
        return out


def predict(folded, model):
    """Full forward trace for one FoldedUser."""
    return model.traces([folded])[0]


def predict_flat_baseline(record, model):
    """Probability from the no-folding path: merchant groups concatenated, one transformer."""
    if model.cfg.use_merchant_folding:
        raise ValueError("model was built with merchant folding; build it with use_merchant_folding=False")
    p = model.predict_proba([fold_sequence(record, model.cfg.fold)])[0]
    return None if np.isnan(p) else float(p)


def build_model(cfg=None, stats=None):
    return LbsfModel(cfg, stats)
