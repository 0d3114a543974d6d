"""Ranking metrics, merchant-attention attributions and the attention-cost benchmark."""

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .data import EmptyDatasetError, PaymentBehavior, UserRecord
from .encoding import AmountStats
from .model import LbsfModel, ModelConfig
from .nn import functional as F
from .nn.tensor import no_grad

WEEK = 7 * 86400


class UndefinedMetricError(ValueError):
    pass


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    return s, y.astype(bool)


def auc(scores, labels):
    """Probability that a random positive outscores a random negative; ties count 1/2."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    order = np.argsort(s, kind="stable")
    ss = s[order]
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    ends = np.r_[starts[1:], ss.size]
    # twice the average 1-based rank of each tie group is an integer
    doubled = np.repeat(starts + 1 + ends, ends - starts)
    rank2 = np.empty(s.size, dtype=np.int64)
    rank2[order] = doubled
    u2 = int(rank2[y].sum()) - n_pos * (n_pos + 1)
    return (u2 / 2) / (n_pos * n_neg)


def _top_k(scores, frac):
    n = scores.size
    if not 0 < frac <= 1:
        raise ValueError("frac must lie in (0, 1]")
    # round away float noise such as 0.1 * 30 = 3.0000000000000004
    k = max(1, math.ceil(round(frac * n, 9)))
    order = np.lexsort((np.arange(n), -scores))
    return order[:k]


def recall_at_fraction(scores, labels, frac=0.10):
    """Share of all positives ranked in the top ``ceil(frac * N)`` (ties by input order)."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("recall needs at least one positive")
    return int(y[_top_k(s, frac)].sum()) / n_pos


# -- evaluation report -------------------------------------------------------------


@dataclass
class EvalReport:
    auc: float | None
    recall_at_10pct: float | None
    n_scored: int
    n_unscorable: int
    traces: list | None = field(default=None, repr=False)

    def to_dict(self):
        return {
            "auc": self.auc,
            "recall_at_10pct": self.recall_at_10pct,
            "n_scored": self.n_scored,
            "n_unscorable": self.n_unscorable,
        }


def score_records(records, model, batch_size=256, workers=1):
    """Probabilities aligned with ``records``; NaN marks unscorable users."""
    folded = model.fold_many(records, workers)
    out = np.full(len(records), np.nan)
    for start in range(0, len(records), batch_size):
        chunk = folded[start : start + batch_size]
        out[start : start + len(chunk)] = model.predict_proba(chunk)
    return out


def evaluate(dataset, model, frac=0.10, batch_size=256, workers=1):
    records = list(dataset.records if hasattr(dataset, "records") else dataset)
    if not records:
        raise EmptyDatasetError("empty dataset")
    p = score_records(records, model, batch_size, workers)
    ok = ~np.isnan(p)
    labels = np.array([r.label if r.label is not None else -1 for r in records])
    keep = ok & (labels >= 0)
    a = r = None
    try:
        a = auc(p[keep], labels[keep])
    except UndefinedMetricError:
        pass
    try:
        r = recall_at_fraction(p[keep], labels[keep], frac)
    except UndefinedMetricError:
        pass
    return EvalReport(a, r, int(ok.sum()), int((~ok).sum()))


# -- attributions ----------------------------------------------------------------


@dataclass
class AttributionRecord:
    user_id: str
    ranking: list  # (merchant, weight) pairs, heaviest first
    weekly_counts: dict  # merchant -> payments per 7-day bin

    def to_dict(self):
        return {
            "user_id": self.user_id,
            "ranking": [[m, w] for m, w in self.ranking],
            "weekly_counts": self.weekly_counts,
        }


def export_attributions(dataset, model, top_k_merchants=3, batch_size=256):
    """Rank each user's merchants by CLS attention (mean over heads).

    Every active merchant appears in the ranking; weekly payment counts are
    produced for the ``top_k_merchants`` heaviest, binned in 7-day steps from
    the user's first behavior.
    """
    if not model.cfg.use_merchant_folding:
        raise ValueError("attributions need a model with merchant folding")
    records = list(dataset.records if hasattr(dataset, "records") else dataset)
    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        folded = [model.fold(r) for r in chunk]
        for rec, f, trace in zip(chunk, folded, model.traces(folded)):
            if not trace.scorable:
                out.append(AttributionRecord(rec.user_id, [], {}))
                continue
            weights = trace.merchant_attention.mean(axis=0)
            active = [(j, s.merchant) for j, s in enumerate(f.slots) if s.merchant is not None]
            total = sum(weights[j] for j, _ in active)
            ranked = sorted(((m, float(weights[j] / total)) for j, m in active), key=lambda t: (-t[1], t[0]))
            first = rec.behaviors[0].timestamp
            n_weeks = (rec.behaviors[-1].timestamp - first) // WEEK + 1
            by_name = {s.merchant: s.behaviors for s in f.slots if s.merchant is not None}
            weekly = {}
            for m, _ in ranked[:top_k_merchants]:
                bins = [(b.timestamp - first) // WEEK for b in by_name[m]]
                weekly[m] = np.bincount(bins, minlength=n_weeks).astype(int).tolist()
            out.append(AttributionRecord(rec.user_id, ranked, weekly))
    return out


# -- attention-cost benchmark --------------------------------------------------------


def folded_cells_formula(lengths):
    """Score entries of within-merchant attention plus the (M+1)-token CLS stage."""
    M = len(lengths)
    return sum(int(L) * int(L) for L in lengths) + (M + 1) ** 2


def folded_cells(lengths):
    """Score entries of the full folded forward pass: within, across-merchant and CLS stages."""
    M = len(lengths)
    return folded_cells_formula(lengths) + M * M


def flat_cells(T):
    return int(T) * int(T)


def _bench_user(T, M, seed=0):
    rng = np.random.default_rng(seed)
    sizes = [T // M + (1 if j < T % M else 0) for j in range(M)]
    behaviors = []
    t0 = 1_700_000_000
    for j, n in enumerate(sizes):
        for i in range(n):
            ts = t0 + int(rng.integers(0, 180 * 86400))
            behaviors.append(PaymentBehavior(f"merchant {j:03d}", "bench payment", ts, float(rng.uniform(1, 500))))
    behaviors.sort(key=lambda b: b.timestamp)
    return UserRecord("bench", tuple(behaviors), None), sizes


def _timed(model, folded, trials):
    times = []
    with F.count_attention() as counter:
        with no_grad():
            model.forward(folded)
        cells = counter.cells
    for _ in range(trials):
        t = time.perf_counter()
        with no_grad():
            model.forward(folded)
        times.append(1000.0 * (time.perf_counter() - t))
    return cells, statistics.median(times)


@dataclass
class BenchRow:
    T: int
    M: int
    flat_cells: int
    folded_cells: int
    folded_cells_formula: int
    flat_ms: float
    folded_ms: float

    @property
    def ratio(self):
        return self.folded_cells / self.flat_cells


def bench_fold_vs_flat(T_values, M=64, trials=5, d_model=64, n_heads=4, seed=0):
    """Attention-cell counts (measured by instrumentation) and median forward times.

    Each T uses one user whose T behaviors are spread uniformly over M merchants;
    both models share d_model and n_heads.
    """
    rows = []
    stats = AmountStats(0.0, 1.0)
    for T in T_values:
        T = int(T)
        record, sizes = _bench_user(T, M, seed)
        common = dict(M=M, L_max=max(sizes), d_model=d_model, n_heads=n_heads, seed=seed)
        folded_model = LbsfModel(ModelConfig(**common), stats)
        flat_model = LbsfModel(ModelConfig(use_merchant_folding=False, **common), stats)
        fu = folded_model.fold(record)
        fold_count, fold_ms = _timed(folded_model, [fu], trials)
        flat_count, flat_ms = _timed(flat_model, [fu], trials)
        if flat_count != flat_cells(T) or fold_count != folded_cells(sizes):
            raise AssertionError("instrumented attention cells disagree with the closed form")
        rows.append(BenchRow(T, M, flat_count, fold_count, folded_cells_formula(sizes), flat_ms, fold_ms))
    return rows


BENCH_COLUMNS = ("T", "M", "flat_cells", "folded_cells", "folded_cells_formula", "flat_ms", "folded_ms")


def bench_csv(rows, stream=None):
    buf = stream or io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow([r.T, r.M, r.flat_cells, r.folded_cells, r.folded_cells_formula, f"{r.flat_ms:.3f}", f"{r.folded_ms:.3f}"])
    return buf.getvalue() if stream is None else None
