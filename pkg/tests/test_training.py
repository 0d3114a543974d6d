import math
import struct

import numpy as np
import pytest

from conftest import random_record, tiny_model
from lbsf.data import Dataset, EmptyDatasetError
from lbsf.model import LbsfModel
from lbsf.nn.layers import Linear
from lbsf.nn.tensor import NumericError, Parameter, Tensor, precision, sigmoid
from lbsf.synthetic import SynthesisConfig, generate_synthetic
from lbsf.training import (
    AdamWState,
    CheckpointError,
    TrainConfig,
    adamw_step,
    bce_loss,
    checkpoint_bytes,
    clip_grad_norm,
    load_checkpoint,
    model_from_checkpoint_bytes,
    save_checkpoint,
    train,
)


def test_bce_examples():
    assert float(bce_loss(np.array([1 - 1e-7]), [1]).data) == pytest.approx(0.0, abs=1e-6)
    assert float(bce_loss(np.array([0.5]), [1]).data) == pytest.approx(0.693147, abs=1e-6)
    assert float(bce_loss(np.array([0.5, 0.5]), [1, 0]).data) == pytest.approx(math.log(2), abs=1e-6)
    with pytest.raises(ValueError):
        bce_loss(np.zeros(0), [])


def step_once(theta, grad, **kw):
    p = Parameter(np.array(theta, dtype=np.float64), dtype=np.float64)
    p.grad = None if grad is None else np.array(grad, dtype=np.float64)
    adamw_step([("p", p)], AdamWState(), TrainConfig(**kw))
    return p.data


def test_adamw_examples():
    assert step_once([0.0], [1.0], learning_rate=0.1, weight_decay=0.0)[0] == pytest.approx(-0.1, rel=1e-6)
    np.testing.assert_array_equal(step_once([0.3, -2.0], [0.0, 0.0], weight_decay=0.0), [0.3, -2.0])
    got = step_once([0.3, -2.0], [0.0, 0.0], learning_rate=0.5, weight_decay=0.01)
    np.testing.assert_allclose(got, np.array([0.3, -2.0]) * (1 - 0.5 * 0.01), rtol=1e-15)


def reference_adamw(theta, grads, lr, b1, b2, eps, wd):
    """Direct per-element formula, written independently of the implementation."""
    theta = [float(t) for t in theta]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t, g in enumerate(grads, start=1):
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mhat = m[i] / (1 - b1**t)
            vhat = v[i] / (1 - b2**t)
            theta[i] = theta[i] - lr * wd * theta[i] - lr * mhat / (math.sqrt(vhat) + eps)
    return theta


def test_adamw_matches_reference():
    rng = np.random.default_rng(0)
    cfg = TrainConfig(learning_rate=3e-3, weight_decay=0.05)
    for _ in range(20):
        theta = rng.normal(size=7)
        grads = [rng.normal(size=7) for _ in range(5)]
        p = Parameter(theta.copy(), dtype=np.float64)
        state = AdamWState()
        for g in grads:
            p.grad = g.copy()
            adamw_step([("p", p)], state, cfg)
        ref = reference_adamw(theta, grads, 3e-3, 0.9, 0.999, 1e-8, 0.05)
        np.testing.assert_allclose(p.data, ref, atol=1e-6, rtol=0)
        assert state.step == 5


def test_adamw_skips_frozen_and_names_bad_gradient():
    frozen = Parameter(np.ones(2), trainable=False)
    frozen.grad = np.ones(2)
    adamw_step([("frozen", frozen)], AdamWState(), TrainConfig(learning_rate=1.0))
    np.testing.assert_array_equal(frozen.data, 1.0)
    bad = Parameter(np.ones(2))
    bad.grad = np.array([1.0, np.nan])
    with pytest.raises(NumericError, match="encoder.bad"):
        adamw_step([("encoder.bad", bad)], AdamWState(), TrainConfig())


def test_clip_grad_norm():
    a, b = Parameter(np.zeros(2)), Parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0], np.float32), np.array([4.0], np.float32)
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.sqrt((a.grad**2).sum() + (b.grad**2).sum()) == pytest.approx(1.0, rel=1e-5)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1})


def test_linearly_separable_head():
    """Plain gradient descent through a small classifier drives BCE under 0.05 within 500 steps."""
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 2))
    y = (x @ np.array([1.5, -2.0]) > 0).astype(float)
    with precision(np.float64):
        from lbsf.model import MLPHead

        head = MLPHead(2, rng)
        cfg = TrainConfig(learning_rate=0.05, weight_decay=0.0)
        state = AdamWState()
        for step in range(500):
            head.zero_grad()
            loss = bce_loss(sigmoid(head(Tensor(x)).reshape(64)), y)
            loss.backward()
            adamw_step(head.named_parameters(), state, cfg)
            if float(loss.data) < 0.05:
                break
    assert float(loss.data) < 0.05


def small_dataset(n=10, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(tuple(random_record(rng, f"u{i}", label=int(i % 3 == 0)) for i in range(n)))


def test_train_loop_contract():
    ds = small_dataset()
    m = tiny_model()
    m.stats = None
    _, hist = train(ds, m, TrainConfig(epochs=2, batch_size=4))
    assert len(hist) == 2
    assert m.stats is not None
    assert all(h.n_trained == 10 and h.n_skipped == 0 for h in hist)
    assert m.train_meta["loss_history"] == [h.loss for h in hist]


def test_train_deterministic():
    ds = small_dataset()
    runs = []
    for _ in range(2):
        m = tiny_model()
        _, hist = train(ds, m, TrainConfig(epochs=2, batch_size=3, seed=5))
        runs.append(([h.loss for h in hist], checkpoint_bytes(m)))
    assert runs[0] == runs[1]


def test_train_skips_unscorable_and_rejects_empty():
    from lbsf.data import UserRecord

    ds = Dataset(small_dataset(6).records + (UserRecord("nobody", (), 0),))
    _, hist = train(ds, tiny_model(), TrainConfig(epochs=1, batch_size=7))
    assert hist[0].n_trained == 6 and hist[0].n_skipped == 1
    with pytest.raises(EmptyDatasetError):
        train(Dataset(()), tiny_model(), TrainConfig(epochs=1))


def test_early_stopping_when_enabled():
    ds = small_dataset(12)
    val = small_dataset(9, seed=1)
    _, hist = train(ds, tiny_model(), TrainConfig(epochs=8, batch_size=4, learning_rate=1e-9, early_stopping_patience=1), validation=val)
    assert len(hist) < 8 and hist[0].val_auc is not None


def test_training_reduces_loss_on_planted_data():
    ds = generate_synthetic(SynthesisConfig(n_users=2000, mean_behaviors_per_day=0.4, seed=3))
    m = tiny_model(M=8, L_max=16, d_model=16, hash_buckets=512, token_dim=16)
    m.stats = None
    _, hist = train(ds, m, TrainConfig(epochs=3, batch_size=64, learning_rate=2e-3))
    assert hist[-1].loss < hist[0].loss


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    m = tiny_model(use_timing=False)
    m.train_meta = {"epochs_run": 0}
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.cfg == m.cfg and back.stats == m.stats
    rng = np.random.default_rng(0)
    folded = [m.fold(random_record(rng, f"u{i}")) for i in range(20)]
    assert np.array_equal(m.predict_proba(folded), back.predict_proba(folded))
    assert checkpoint_bytes(back) == checkpoint_bytes(m)
    assert back.checkpoint_config["field_order"] == ["description", "amount"]


def test_checkpoint_header_layout():
    buf = checkpoint_bytes(tiny_model())
    assert buf[:4] == b"LBSF"
    assert struct.unpack("<I", buf[4:8])[0] == 1


def test_checkpoint_rejects_bad_input(tmp_path):
    buf = bytearray(checkpoint_bytes(tiny_model()))
    with pytest.raises(CheckpointError, match="magic"):
        model_from_checkpoint_bytes(b"XXXX" + bytes(buf[4:]))
    tampered = bytearray(buf)
    tampered[4] = 9
    with pytest.raises(CheckpointError, match="version 9"):
        model_from_checkpoint_bytes(bytes(tampered))
    with pytest.raises(CheckpointError, match="truncated"):
        model_from_checkpoint_bytes(bytes(buf[:-100]))
    flipped = bytearray(buf)
    flipped[-20] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        model_from_checkpoint_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_missing_parameter_named():
    m = tiny_model()
    del m.classifier.out.bias
    m.classifier.out.bias = None
    with pytest.raises(CheckpointError, match="classifier.out.bias"):
        model_from_checkpoint_bytes(checkpoint_bytes(m))
