import numpy as np
import pytest

from conftest import T0, DAY, random_record, record, tiny_model
from lbsf.folding import MerchantSlot, FoldedUser, fold_sequence
from lbsf.model import ModelConfig, LbsfModel, predict, predict_flat_baseline
from lbsf.nn import functional as F
from lbsf.nn.tensor import Tensor, no_grad


def zero(module):
    for p in module.parameters():
        p.data[:] = 0


def test_default_shapes():
    m = LbsfModel(ModelConfig())
    rng = np.random.default_rng(0)
    H = Tensor(rng.normal(size=(74, 128)))
    out = m.meld_across_merchants(H, np.ones(74, bool))
    assert out.shape == (74, 128)
    assert m.fuse_merchant_text(Tensor(np.ones((1, 128))), Tensor(np.ones((1, 128)))).shape == (1, 128)
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len(set(names))
    assert m.cls.trainable and m.cls.shape == (128,)
    assert m.classifier.hidden.weight.shape == (128, 64)


def test_within_melding_single_behavior():
    m = tiny_model()
    zero(m.within)
    rec = record("u", [("A", T0, 5.0)])
    e = m.encoder.encode_behaviors(rec.behaviors)
    pe = F.positional_encoding(2, 16)
    h = m._meld_sequences(e, [np.array([0])], m.within, False)
    np.testing.assert_allclose(h.data[0], e.data[0] + pe[0], atol=1e-6)
    # two identical behaviors pool to the mean of their two positions
    e2 = m.encoder.encode_behaviors(rec.behaviors * 2)
    h2 = m._meld_sequences(e2, [np.array([0, 1])], m.within, False)
    np.testing.assert_allclose(h2.data[0], e.data[0] + pe.mean(axis=0), atol=1e-6)


def test_fuse_merchant_text():
    m = tiny_model()
    rng = np.random.default_rng(0)
    h, t = Tensor(rng.normal(size=(3, 16))), Tensor(rng.normal(size=(3, 16)))
    zero(m.merchant_fusion)
    assert not m.fuse_merchant_text(h, t).data.any()
    m.merchant_fusion.weight.data[:] = np.vstack([np.eye(16), np.zeros((16, 16))])
    np.testing.assert_allclose(m.fuse_merchant_text(h, t).data, F.gelu(h).data)


def test_across_single_active_identity_and_mask():
    m = tiny_model()
    zero(m.across)
    H = Tensor(np.random.default_rng(0).normal(size=(4, 16)))
    mask = np.array([True, False, False, False])
    out = m.meld_across_merchants(H, mask)
    np.testing.assert_array_equal(out.data[0], H.data[0])
    assert not out.data[1:].any()
    with pytest.raises(ValueError):
        m.meld_across_merchants(H, np.zeros(4, bool))


def test_cls_stage():
    m = tiny_model()
    rng = np.random.default_rng(1)
    H = Tensor(rng.normal(size=(2, 4, 16)))
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 0]], bool)
    u, w = m.relational_learning_cls(H, mask)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(w[0][:, 2] == 0.0)
    np.testing.assert_allclose(w[1][:, 0], 1.0)
    zero(m.relational)
    u, _ = m.relational_learning_cls(H, mask)
    np.testing.assert_allclose(u.data, np.tile(m.cls.data, (2, 1)))


def test_predict_trace():
    m = tiny_model()
    f = fold_sequence(random_record(np.random.default_rng(0), "u1"), m.cfg.fold)
    t = predict(f, m)
    assert t.scorable and 0 < t.probability < 1
    assert t.merchant_attention.shape == (2, 4)
    active = f.merchant_mask
    np.testing.assert_allclose(t.merchant_attention[:, active].sum(axis=1), 1.0, atol=1e-6)
    again = predict(f, m)
    assert again.probability == t.probability
    np.testing.assert_array_equal(again.merchant_attention, t.merchant_attention)
    assert t.merchant_embeddings.shape == t.enhanced_embeddings.shape == (4, 16)


def test_unscorable_user():
    m = tiny_model()
    f = fold_sequence(record("empty", []), m.cfg.fold)
    t = predict(f, m)
    assert not t.scorable and t.probability is None
    assert np.isnan(m.predict_proba([f])[0])
    flat = tiny_model(use_merchant_folding=False)
    assert predict_flat_baseline(record("empty", []), flat) is None


def test_flat_baseline():
    m = tiny_model(use_merchant_folding=False, L_max=64)
    rec = random_record(np.random.default_rng(0), "u", n_merchants=3, max_per=6)
    p = predict_flat_baseline(rec, m)
    assert 0 < p < 1
    t = predict(fold_sequence(rec, m.cfg.fold), m)
    assert t.merchant_attention.size == 0
    n = len(rec.behaviors)
    with F.count_attention() as c:
        predict_flat_baseline(rec, m)
    assert c.matrices == [n]
    with pytest.raises(ValueError):
        predict_flat_baseline(rec, tiny_model())


def test_flat_and_folded_share_within_melding():
    """For a one-behavior user with zeroed transformers both paths pool the same vector."""
    folded, flat = tiny_model(), tiny_model(use_merchant_folding=False)
    zero(folded.within)
    zero(flat.within)
    for (_, a), (_, b) in zip(folded.encoder.named_parameters(), flat.encoder.named_parameters()):
        b.data[:] = a.data
    rec = record("u", [("A", T0, 7.0)])
    e = folded.encoder.encode_behaviors(rec.behaviors)
    h_fold = folded._meld_sequences(e, [np.array([0])], folded.within, False)
    h_flat = flat._meld_sequences(flat.encoder.encode_behaviors(rec.behaviors), [np.array([0])], flat.within, False)
    np.testing.assert_array_equal(h_fold.data, h_flat.data)
    fused = folded.fuse_merchant_text(h_fold, folded.encoder.encode_merchants(["A"]))
    assert not np.allclose(fused.data, h_fold.data)


def permute_slots(f, perm):
    return FoldedUser(f.user_id, tuple(f.slots[i] for i in perm), f.L_max)


def test_slot_permutation_invariance():
    rng = np.random.default_rng(7)
    m = tiny_model(M=6)
    for case in range(200):
        rec = random_record(rng, f"u{case}", n_merchants=int(rng.integers(1, 7)), max_per=4)
        f = fold_sequence(rec, m.cfg.fold)
        perm = rng.permutation(6)
        a, b = predict(f, m), predict(permute_slots(f, perm), m)
        assert abs(a.probability - b.probability) <= 1e-5
        np.testing.assert_allclose(b.merchant_attention, a.merchant_attention[:, perm], atol=1e-5)


def test_slot_order_matters_with_merchant_positions():
    m = tiny_model(M=4, merchant_pos_enc=True)
    rec = random_record(np.random.default_rng(3), "u", n_merchants=4)
    f = fold_sequence(rec, m.cfg.fold)
    a, b = predict(f, m), predict(permute_slots(f, [3, 2, 1, 0]), m)
    assert a.probability != b.probability


def test_padding_invariance_exact():
    rng = np.random.default_rng(11)
    small = tiny_model(M=4)
    wide = tiny_model(M=9)  # identical parameters; only the slot count differs
    for case in range(200):
        rec = random_record(rng, f"u{case}", n_merchants=int(rng.integers(1, 5)), max_per=5)
        other = random_record(rng, f"v{case}", n_merchants=4, max_per=6)
        f = fold_sequence(rec, small.cfg.fold)
        alone = small.predict_proba([f])[0]
        # longer batch-mates force extra padded behaviors; more slots add masked merchants
        batched = small.predict_proba([fold_sequence(other, small.cfg.fold), f])[1]
        widened = wide.predict_proba([fold_sequence(rec, wide.cfg.fold)])[0]
        assert alone == batched == widened


def test_gradient_check_end_to_end():
    from lbsf.nn import finite_diff_check
    from lbsf.nn.tensor import precision, sigmoid

    with precision(np.float64):
        m = tiny_model(M=4, L_max=4, d_model=16, n_heads=1)
        rng = np.random.default_rng(0)
        recs = [random_record(rng, f"u{i}", n_merchants=3, max_per=4, label=i % 2) for i in range(3)]
        folded = [m.fold(r) for r in recs]
        y = np.array([r.label for r in recs])

        def f():
            logits, pos, _ = m.forward(folded)
            return F.binary_cross_entropy(sigmoid(logits), y[pos])

        params = [p for n, p in m.named_parameters() if not n.endswith("key.bias")]
        assert finite_diff_check(f, params, n_coords=300) < 1e-4


def test_config_round_trip():
    cfg = ModelConfig(M=5, d_model=32, use_amount=False)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        ModelConfig(use_amount=False, use_timing=False, use_description=False)
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4)
