import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import behavior
from lbsf.encoding import (
    AmountStats,
    BehaviorEncoder,
    ConfigError,
    EncoderConfig,
    TokenVocab,
    amount_feature,
    encode_behavior,
    encode_text,
    fnv1a_64,
    time_embed,
    time_features,
    tokenize_text,
)
from lbsf.nn.tensor import Parameter

V = TokenVocab(8192, 64)


def test_fnv1a_reference_vectors():
    # published FNV-1a 64-bit test vectors
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_tokenize():
    toks = tokenize_text("Coffee Shop", V)
    assert len(toks) == 2 and all(0 <= t < V.hash_buckets for t in toks)
    assert tokenize_text("", V) == []
    assert tokenize_text("Coffee Shop", V) == toks
    assert tokenize_text("coffee, SHOP!", V) == toks
    assert toks[0] == fnv1a_64(b"coffee") % 8192


def test_encode_text():
    v = TokenVocab(16, 3)
    table = Parameter(np.arange(48, dtype=np.float64).reshape(16, 3))
    (a,) = tokenize_text("alpha", v)
    (b,) = tokenize_text("beta", v)
    np.testing.assert_allclose(encode_text("alpha", v, table).data, table.data[a])
    np.testing.assert_allclose(encode_text("", v, table).data, np.zeros(3))
    np.testing.assert_allclose(encode_text("alpha beta", v, table).data, (table.data[a] + table.data[b]) / 2)


def hour_pair(ts):
    return time_embed(ts)[6:8]


def test_time_embed_hours():
    np.testing.assert_allclose(hour_pair(0), [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(hour_pair(12 * 3600), [-1.0, 0.0], atol=1e-12)
    near = np.linalg.norm(hour_pair(23 * 3600) - hour_pair(24 * 3600))
    assert near == pytest.approx(0.26105238444010315, abs=1e-12)  # 2 sin(pi/24)
    assert np.linalg.norm(hour_pair(12 * 3600) - hour_pair(0)) == pytest.approx(2.0)


def test_time_embed_calendar():
    # 2024-03-15 10:00 UTC is a Friday
    ts = 1710496800
    f = time_embed(ts)
    expect = []
    for t, period in ((2, 12), (14, 31), (4, 7), (10, 24)):
        expect += [math.cos(2 * math.pi * t / period), math.sin(2 * math.pi * t / period)]
    np.testing.assert_allclose(f, expect, atol=1e-12)
    with pytest.raises(ValueError):
        time_embed(-1)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 4 * 10**9), st.integers(0, 400))
def test_time_properties(ts, k):
    f = time_features(np.array([ts]))[0]
    assert np.all(np.abs(f) <= 1.0)
    np.testing.assert_allclose(np.hypot(f[0::2], f[1::2]), 1.0, atol=1e-12)
    np.testing.assert_allclose(time_embed(ts + k * 86400)[6:8], f[6:8], atol=1e-9)
    np.testing.assert_allclose(time_embed(ts + k * 7 * 86400)[4:8], f[4:8], atol=1e-9)


def test_amount_stats():
    assert amount_feature(0.0, AmountStats(0.0, 1.0)) == 0.0
    with pytest.raises(ConfigError):
        AmountStats(1.0, 0.0)
    from lbsf.data import UserRecord

    recs = [UserRecord("u", (behavior("A", 1, math.e - 1), behavior("A", 2, math.e**3 - 1)))]
    s = AmountStats.fit(recs)
    assert s.mu == pytest.approx(2.0) and s.sigma == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        AmountStats.fit([UserRecord("u", (behavior("A", 1, 5.0), behavior("A", 2, 5.0)))])


def make_encoder(**kw):
    cfg = EncoderConfig(TokenVocab(64, 8), 16, **kw)
    return BehaviorEncoder(cfg, np.random.default_rng(0), AmountStats(1.0, 2.0))


def test_behavior_embedding_shape_and_zero_weights():
    enc = make_encoder()
    b = behavior("Shop", 1_700_000_000, 12.5, "coffee beans")
    assert encode_behavior(b, enc).shape == (16,)
    enc.fusion.weight.data[:] = 0
    enc.fusion.bias.data[:] = 0
    assert not encode_behavior(b, enc).data.any()
    default = BehaviorEncoder(EncoderConfig(), np.random.default_rng(0), AmountStats())
    assert encode_behavior(b, default).shape == (128,)


def test_feature_layout():
    enc = make_encoder()
    b = behavior("Shop", 1_700_000_000, 12.5, "coffee beans")
    x = enc.features([b]).data[0]
    np.testing.assert_allclose(x[:8], encode_text("coffee beans", enc.cfg.vocab, enc.token_table).data, rtol=1e-6)
    np.testing.assert_allclose(x[8:16], time_embed(b.timestamp), atol=1e-6)
    assert x[16] == pytest.approx((math.log1p(12.5) - 1.0) / 2.0, rel=1e-6)
    assert enc.cfg.field_layout == [("description", 8), ("time", 8), ("amount", 1)]


@pytest.mark.parametrize("flag,width", [("use_amount", 16), ("use_timing", 9), ("use_description", 9)])
def test_disabled_field_changes_width(flag, width):
    enc = make_encoder(**{flag: False})
    assert enc.cfg.input_width == width
    assert enc.fusion.weight.shape == (width, 16)


def test_all_fields_disabled_rejected():
    with pytest.raises(ConfigError):
        EncoderConfig(use_amount=False, use_timing=False, use_description=False)


def test_unfitted_amount_scaling():
    enc = BehaviorEncoder(EncoderConfig(TokenVocab(64, 8), 16), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        enc.features([behavior("A", 1)])


def test_gradient_reaches_only_present_tokens():
    enc = make_encoder()
    out = enc.encode_behaviors([behavior("A", 1_700_000_000, 3.0, "alpha beta")]).sum()
    out.backward()
    rows = np.flatnonzero(np.abs(enc.token_table.grad).sum(axis=1))
    assert sorted(rows) == sorted(set(tokenize_text("alpha beta", enc.cfg.vocab)))
