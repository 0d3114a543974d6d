"""Payment behavior records, JSONL ingestion/serialization and validation."""

import io
import json
import math
import os
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

SPLITS = ("train", "validation", "test")


class DataError(ValueError):
    """Malformed or invalid input data.  ``line`` is 1-based when known."""

    def __init__(self, message, line=None, field=None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


class EmptyDatasetError(DataError):
    def __init__(self, message="empty dataset"):
        super().__init__(message)


@dataclass(frozen=True)
class PaymentBehavior:
    merchant: str
    description: str
    timestamp: int
    amount: float


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    behaviors: tuple
    label: int | None = None

    def __post_init__(self):
        if not isinstance(self.behaviors, tuple):
            object.__setattr__(self, "behaviors", tuple(self.behaviors))


@dataclass(frozen=True)
class Dataset:
    records: tuple
    split: str = "train"
    # ground truth planted by the synthetic generator; never serialized
    planted: MappingProxyType = field(default_factory=lambda: MappingProxyType({}), compare=False, repr=False)

    def __post_init__(self):
        if not isinstance(self.records, tuple):
            object.__setattr__(self, "records", tuple(self.records))
        if not isinstance(self.planted, MappingProxyType):
            object.__setattr__(self, "planted", MappingProxyType(dict(self.planted)))
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        seen = set()
        for r in self.records:
            if r.user_id in seen:
                raise DataError(f"duplicate user_id {r.user_id!r} in split {self.split}")
            seen.add(r.user_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def labels(self):
        return np.array([-1 if r.label is None else r.label for r in self.records])

    def subset(self, indices, split=None):
        recs = tuple(self.records[i] for i in indices)
        planted = {r.user_id: self.planted[r.user_id] for r in recs if r.user_id in self.planted}
        return Dataset(recs, split or self.split, planted)


def validate_record(r):
    """Return a list of ``"field: rule"`` violations; empty when the record is valid."""
    out = []
    if not isinstance(r.user_id, str) or not r.user_id:
        out.append("user_id: must be a non-empty string")
    if r.label is not None and (isinstance(r.label, bool) or r.label not in (0, 1)):
        out.append("label: must be 0 or 1")
    prev = None
    for b in r.behaviors:
        if not isinstance(b.merchant, str) or not b.merchant:
            out.append("merchant: must be non-empty")
        if not isinstance(b.description, str):
            out.append("description: must be text")
        if isinstance(b.timestamp, bool) or not isinstance(b.timestamp, (int, np.integer)):
            out.append("timestamp: must be an integer")
        elif b.timestamp <= 0:
            out.append("timestamp: must be > 0")
        if not isinstance(b.amount, (int, float)) or isinstance(b.amount, bool) or not math.isfinite(b.amount):
            out.append("amount: must be a finite number")
        elif b.amount < 0:
            out.append("amount: must be ≥ 0")
        if prev is not None and isinstance(b.timestamp, (int, np.integer)) and b.timestamp < prev:
            out.append("behaviors: must be sorted by timestamp")
        if isinstance(b.timestamp, (int, np.integer)):
            prev = b.timestamp
    return out


def _behavior_from_json(obj, lineno):
    if not isinstance(obj, dict):
        raise DataError("behavior must be an object", lineno, "behaviors")
    for key in ("merchant", "description", "ts", "amount"):
        if key not in obj:
            raise DataError(f"behavior missing {key!r}", lineno, key)
    merchant, desc, ts, amount = obj["merchant"], obj["description"], obj["ts"], obj["amount"]
    if not isinstance(merchant, str) or not merchant:
        raise DataError("merchant: must be a non-empty string", lineno, "merchant")
    if not isinstance(desc, str):
        raise DataError("description: must be a string", lineno, "description")
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise DataError("ts: must be an integer", lineno, "ts")
    if ts <= 0:
        raise DataError("ts: must be > 0", lineno, "ts")
    if isinstance(amount, bool) or not isinstance(amount, (int, float)) or not math.isfinite(amount):
        raise DataError("amount: must be a finite number", lineno, "amount")
    if amount < 0:
        raise DataError("amount: must be ≥ 0", lineno, "amount")
    return PaymentBehavior(merchant, desc, ts, round(float(amount), 2))


def record_from_json(obj, lineno=None):
    if not isinstance(obj, dict):
        raise DataError("record must be a JSON object", lineno)
    user_id = obj.get("user_id")
    if not isinstance(user_id, str) or not user_id:
        raise DataError("user_id: must be a non-empty string", lineno, "user_id")
    label = obj.get("label")
    if label is not None and (isinstance(label, bool) or label not in (0, 1)):
        raise DataError("label: must be 0 or 1", lineno, "label")
    raw = obj.get("behaviors", [])
    if not isinstance(raw, list):
        raise DataError("behaviors: must be a list", lineno, "behaviors")
    behaviors = [_behavior_from_json(b, lineno) for b in raw]
    # stable sort keeps input order among equal timestamps
    behaviors.sort(key=lambda b: b.timestamp)
    return UserRecord(user_id, tuple(behaviors), label)


def record_to_json(r):
    obj = {"user_id": r.user_id}
    if r.label is not None:
        obj["label"] = int(r.label)
    obj["behaviors"] = [
        {"merchant": b.merchant, "description": b.description, "ts": int(b.timestamp), "amount": b.amount}
        for b in r.behaviors
    ]
    return obj


def parse_jsonl(stream, split="train"):
    """Read a Dataset from JSONL (bytes or text stream, or a path)."""
    if isinstance(stream, (str, os.PathLike)):
        with open(stream, "rb") as fh:
            return parse_jsonl(fh, split)
    if isinstance(stream, bytes):
        stream = io.BytesIO(stream)
    records = []
    seen = set()
    for lineno, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            try:
                line = line.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise DataError(f"invalid UTF-8: {exc}", lineno) from None
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed JSON: {exc.msg}", lineno) from None
        rec = record_from_json(obj, lineno)
        if rec.user_id in seen:
            raise DataError(f"duplicate user_id {rec.user_id!r}", lineno, "user_id")
        seen.add(rec.user_id)
        records.append(rec)
    return Dataset(tuple(records), split)


def serialize_jsonl(dataset, stream=None):
    """Write ``dataset`` as JSONL; returns the text when ``stream`` is None."""
    lines = [json.dumps(record_to_json(r), ensure_ascii=False, separators=(",", ":")) for r in dataset.records]
    text = "".join(line + "\n" for line in lines)
    if stream is None:
        return text
    if isinstance(stream, io.TextIOBase):
        stream.write(text)
    else:
        stream.write(text.encode("utf-8"))
    return None


def stratified_split(dataset, test_fraction=0.3, seed=0):
    """Split into (train, test) keeping the label ratio; deterministic in ``seed``."""
    labels = dataset.labels
    rng = np.random.default_rng(seed)
    test_idx = []
    for value in np.unique(labels):
        idx = np.flatnonzero(labels == value)
        idx = idx[rng.permutation(len(idx))]
        test_idx.extend(idx[: int(round(test_fraction * len(idx)))].tolist())
    test_set = set(test_idx)
    train_idx = [i for i in range(len(dataset)) if i not in test_set]
    return dataset.subset(train_idx, "train"), dataset.subset(sorted(test_set), "test")
