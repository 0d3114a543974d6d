"""BCE objective, AdamW, the mini-batch loop and checkpoint persistence."""

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from .data import EmptyDatasetError
from .encoding import AmountStats
from .model import LbsfModel, ModelConfig
from .nn import functional as F
from .nn.tensor import NumericError, as_tensor, sigmoid

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LBSF"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 256
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    grad_clip_norm: float | None = None
    pos_weight: float = 1.0
    early_stopping_patience: int | None = None  # off unless set

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("train.learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("train.epochs must be >= 0")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ValueError("train.grad_clip_norm must be > 0 when set")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def bce_loss(probs, labels, eps=1e-7, pos_weight=1.0):
    """Mean binary cross-entropy on probabilities (Tensor or array)."""
    return F.binary_cross_entropy(as_tensor(probs), labels, eps, pos_weight)


# -- optimizer --------------------------------------------------------------------


class AdamWState:
    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}


def adamw_step(params, state, cfg):
    """One decoupled-weight-decay Adam update of every trainable parameter in place.

    ``params`` is an iterable of (name, Parameter); a parameter without a
    gradient is treated as having a zero gradient.
    """
    params = [(n, p) for n, p in params if p.trainable]
    for name, p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"gradient of parameter {name!r}")
    state.step += 1
    t = state.step
    lr = cfg.learning_rate
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.data.dtype)


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


# -- loop -------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    loss: float
    val_auc: float | None
    n_trained: int
    n_skipped: int


def _batch_loss(model, folded, labels, cfg):
    logits, pos, _ = model.forward(folded, training=True)
    if logits is None:
        return None, 0
    probs = sigmoid(logits)
    loss = bce_loss(probs, labels[pos], pos_weight=cfg.pos_weight)
    return loss, len(pos)


def train(dataset, model, cfg=None, validation=None, workers=1):
    """Fit ``model`` on the labelled records of ``dataset``.

    Amount scaling is fitted on ``dataset`` when the model has none.  Returns
    ``(model, history)`` with one :class:`EpochLog` per epoch run.
    """
    from .evaluation import UndefinedMetricError, auc

    cfg = cfg or TrainConfig()
    records = list(dataset.records if hasattr(dataset, "records") else dataset)
    if not records:
        raise EmptyDatasetError("empty dataset")
    if any(r.label is None for r in records):
        raise ValueError("training needs labelled records")
    if model.stats is None:
        model.stats = AmountStats.fit(records)
    folded = model.fold_many(records, workers)
    labels = np.array([r.label for r in records], dtype=np.float64)
    val = None
    if validation is not None and len(validation):
        vrec = list(validation.records if hasattr(validation, "records") else validation)
        val = (model.fold_many(vrec, workers), np.array([r.label for r in vrec]))

    rng = np.random.default_rng(cfg.seed)
    state = AdamWState()
    named = list(model.named_parameters())
    trainable = [p for _, p in named if p.trainable]
    history = []
    best, stale = -math.inf, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(records))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            ix = order[start : start + cfg.batch_size]
            loss, n = _batch_loss(model, [folded[i] for i in ix], labels[ix], cfg)
            if loss is None:
                continue
            model.zero_grad()
            loss.backward()
            if cfg.grad_clip_norm is not None:
                clip_grad_norm(trainable, cfg.grad_clip_norm)
            adamw_step(named, state, cfg)
            total += float(loss.data) * n
            count += n
        val_auc = None
        if val is not None:
            p = model.predict_proba(val[0])
            ok = ~np.isnan(p)
            try:
                val_auc = auc(p[ok], val[1][ok])
            except UndefinedMetricError:
                val_auc = None
        entry = EpochLog(epoch + 1, total / count if count else float("nan"), val_auc, count, len(records) - count)
        history.append(entry)
        log.info("epoch %d loss %.6f val_auc %s", entry.epoch, entry.loss, val_auc)
        if cfg.early_stopping_patience is not None and val_auc is not None:
            if val_auc > best:
                best, stale = val_auc, 0
            else:
                stale += 1
                if stale >= cfg.early_stopping_patience:
                    break
    model.train_meta = {
        "epochs_run": len(history),
        "seed": cfg.seed,
        "train_config": asdict(cfg),
        "loss_history": [h.loss for h in history],
        "val_auc_history": [h.val_auc for h in history],
    }
    return model, history


# -- checkpoints ------------------------------------------------------------------


class CheckpointError(ValueError):
    """A checkpoint file could not be read."""


def _checkpoint_config(model, extra):
    stats = model.stats
    return {
        "tool": "lbsf",
        "tool_version": __version__,
        "model": model.cfg.to_dict(),
        "fold": {"M": model.cfg.M, "L_max": model.cfg.L_max},
        "amount_stats": None if stats is None else {"mu": stats.mu, "sigma": stats.sigma},
        "field_order": [name for name, _ in model.cfg.encoder.field_layout],
        "training": getattr(model, "train_meta", None),
        "extra": extra or {},
    }


def checkpoint_bytes(model, extra=None):
    header = json.dumps(_checkpoint_config(model, extra), sort_keys=True).encode("utf-8")
    params = list(model.named_parameters())
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    out.append(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        out.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model, path, extra=None):
    data = checkpoint_bytes(model, extra)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def model_from_checkpoint_bytes(buf):
    r = _Reader(buf)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not an lbsf checkpoint (bad magic)")
    version, hlen = r.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    try:
        config = json.loads(r.take(hlen, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint config: {exc}") from None
    (n_params,) = r.unpack("<I", "parameter count")
    tensors = {}
    for _ in range(n_params):
        (nlen,) = r.unpack("<H", "parameter name")
        name = r.take(nlen, "parameter name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B", f"shape of {name}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * size, f"payload of {name}"), dtype="<f4").reshape(shape)
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")
    if crc != zlib.crc32(buf[: r.pos - 4]):
        raise CheckpointError("checkpoint checksum mismatch (corrupt file)")

    try:
        cfg = ModelConfig.from_dict(config["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid model config in checkpoint: {exc}") from None
    stats = config.get("amount_stats")
    model = LbsfModel(cfg, AmountStats(**stats) if stats else None)
    expected = dict(model.named_parameters())
    for name, p in expected.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(f"parameter {name!r} has shape {tensors[name].shape}, expected {p.data.shape}")
        p.data = tensors[name].astype(p.data.dtype)
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise CheckpointError(f"checkpoint has unknown parameters {extra}")
    model.train_meta = config.get("training")
    model.checkpoint_config = config
    return model


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return model_from_checkpoint_bytes(buf)


__all__ = [
    "AdamWState",
    "CheckpointError",
    "EpochLog",
    "TrainConfig",
    "adamw_step",
    "bce_loss",
    "checkpoint_bytes",
    "clip_grad_norm",
    "load_checkpoint",
    "model_from_checkpoint_bytes",
    "save_checkpoint",
    "train",
]
