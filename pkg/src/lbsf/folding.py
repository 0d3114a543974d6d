"""Merchant-level folding of a flat behavior sequence into M sub-sequences."""

from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

NULL_SLOT = None


@dataclass(frozen=True)
class FoldConfig:
    M: int = 74
    L_max: int = 128

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("fold.M must be >= 1")
        if self.L_max < 1:
            raise ValueError("fold.L_max must be >= 1")


@dataclass(frozen=True)
class MerchantSlot:
    merchant: str | None
    behaviors: tuple

    @property
    def active_len(self):
        return len(self.behaviors)


@dataclass(frozen=True)
class FoldedUser:
    user_id: str
    slots: tuple
    L_max: int

    @property
    def M(self):
        return len(self.slots)

    @property
    def merchant_mask(self):
        return tuple(s.merchant is not NULL_SLOT for s in self.slots)

    @property
    def behavior_masks(self):
        return tuple(tuple(i < s.active_len for i in range(self.L_max)) for s in self.slots)

    @property
    def n_active(self):
        return sum(self.merchant_mask)

    def behaviors(self):
        """All retained behaviors, slot by slot."""
        return [b for s in self.slots for b in s.behaviors]


def _order_key(b):
    # total order so ties in timestamp do not depend on input order
    return (b.timestamp, b.description, b.amount)


def select_merchants(record, cfg):
    """Top-M merchants by count; ties by latest transaction, then name."""
    counts = defaultdict(int)
    latest = {}
    for b in record.behaviors:
        counts[b.merchant] += 1
        latest[b.merchant] = max(latest.get(b.merchant, b.timestamp), b.timestamp)
    ranked = sorted(counts, key=lambda m: (-counts[m], -latest[m], m))
    return ranked[: cfg.M]


def fold_sequence(record, cfg):
    selected = select_merchants(record, cfg)
    groups = {m: [] for m in selected}
    for b in record.behaviors:
        if b.merchant in groups:
            groups[b.merchant].append(b)
    slots = []
    for m in selected:
        seq = sorted(groups[m], key=_order_key)[-cfg.L_max :]
        slots.append(MerchantSlot(m, tuple(seq)))
    slots.extend(MerchantSlot(NULL_SLOT, ()) for _ in range(cfg.M - len(selected)))
    return FoldedUser(record.user_id, tuple(slots), cfg.L_max)


def _fold_chunk(args):
    records, cfg = args
    return [fold_sequence(r, cfg) for r in records]


def fold_many(records, cfg, workers=1):
    """Fold every record, in input order; ``workers > 1`` folds in subprocesses."""
    records = list(records)
    if workers <= 1 or len(records) < 2 * workers:
        return [fold_sequence(r, cfg) for r in records]
    size = -(-len(records) // workers)
    chunks = [(records[i : i + size], cfg) for i in range(0, len(records), size)]
    with ProcessPoolExecutor(workers) as pool:
        return [f for part in pool.map(_fold_chunk, chunks) for f in part]


class PaddingError(ValueError):
    pass


def pad_and_mask(folded, batch_L):
    """Right-pad every slot to ``batch_L``.

    Returns ``(index, mask)`` of shape (M, batch_L): ``index`` points into
    ``folded.behaviors()`` and is -1 on padding; ``mask`` is true on real rows.
    """
    longest = max((s.active_len for s in folded.slots), default=0)
    if batch_L < longest:
        raise PaddingError(f"batch_L={batch_L} is shorter than an active sub-sequence ({longest})")
    index = np.full((folded.M, batch_L), -1, dtype=np.int64)
    offset = 0
    for j, s in enumerate(folded.slots):
        n = s.active_len
        index[j, :n] = np.arange(offset, offset + n)
        offset += n
    return index, index >= 0
