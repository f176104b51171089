import math

import numpy as np
import pytest

from rankplat import nn
from rankplat.domain import Action, Item, LocalContext
from rankplat.encoder import EncoderInput
from rankplat.retrieval import (EmbeddingSet, RetrievalConfig, TrainingSequence, TwoTowerModel, embed_customer,
                                export_item_embeddings, full_softmax_probs, log_uniform_probs, log_uniform_sample,
                                num_negatives, sample_negative_matrix, sampled_softmax_from_logits,
                                sampled_softmax_loss, train_retrieval)


def model_for(tiny, vocab, enc_cfg, **kw):
    return TwoTowerModel(RetrievalConfig(encoder=enc_cfg, d_emb=6, **kw), tiny.catalog, vocab, "v1")


def training_set(tiny):
    return [TrainingSequence(cid, tuple(a), tiny.global_ctx[cid]) for cid, a in sorted(tiny.actions.items())]


# -- sampler ------------------------------------------------------------------


def test_log_uniform_four_classes():
    p = log_uniform_probs(4)
    assert p[0] == pytest.approx(math.log(2) / math.log(5))
    assert p.sum() == pytest.approx(1.0)


def test_log_uniform_empirical_tv():
    rng = np.random.default_rng(0)
    n = 50
    draws = np.array([log_uniform_sample(n, 1, (), rng)[0] for _ in range(100_000)])
    emp = np.bincount(draws, minlength=n) / len(draws)
    assert 0.5 * np.abs(emp - log_uniform_probs(n)).sum() < 0.01


def test_negative_count_matches_ratio():
    assert num_negatives(10_000) == 42
    assert num_negatives(2_000) == 9
    assert num_negatives(10) == 1


def test_forced_sample_when_all_but_one_excluded():
    rng = np.random.default_rng(0)
    assert log_uniform_sample(5, 1, {0, 1, 3, 4}, rng).tolist() == [2]
    with pytest.raises(ValueError):
        log_uniform_sample(5, 2, {0, 1, 3, 4}, rng)


def test_sample_rows_are_distinct_and_exclude_positive():
    rng = np.random.default_rng(1)
    pos = rng.integers(0, 30, 200)
    neg = sample_negative_matrix(30, 6, pos, rng)
    assert neg.shape == (200, 6)
    assert not (neg == pos[:, None]).any()
    assert all(len(set(r)) == 6 for r in neg.tolist())


# -- loss ---------------------------------------------------------------------


def test_loss_symmetric_case_is_ln2():
    u = nn.Tensor(np.array([[1.0, 0.0]]))
    loss = sampled_softmax_loss(u, nn.Tensor(np.array([[0.5, 1.0]])), nn.Tensor(np.array([[[0.5, -1.0]]])))
    assert float(loss.data) == pytest.approx(math.log(2))


def test_loss_vanishes_for_dominant_positive():
    logits = nn.Tensor(np.array([[1e6, 0.0, 0.0]]))
    assert float(sampled_softmax_from_logits(logits).data) < 1e-12


def test_loss_matches_hand_softmax_with_logq():
    logits = np.array([[2.0, 0.5, -1.0]])
    q = np.array([[0.5, 0.3, 0.2]])
    z = logits - np.log(q)
    expected = -(z[0, 0] - math.log(np.exp(z[0]).sum()))
    got = sampled_softmax_from_logits(nn.Tensor(logits), np.log(q))
    assert float(got.data) == pytest.approx(expected, rel=1e-12)


# -- model --------------------------------------------------------------------


def test_full_retrieval_loss_gradients():
    from rankplat.diagnostics import GRAD_TOLERANCE, _model_checks, tiny_corpus
    checks = _model_checks(tiny_corpus(3), 3)
    rng = np.random.default_rng(0)
    for name in ("retrieval_loss", "retrieval_loss_ntr"):
        fn, params, reset = checks[name]
        reset(rng)
        assert nn.grad_check(fn, params, max_entries=3, rng=rng) < GRAD_TOLERANCE


def test_deterministic_transition_is_learned(tiny, tiny_vocab, small_encoder_cfg):
    ids = tiny.catalog.ids
    a, b = int(ids[3]), int(ids[10])
    t0 = tiny.cfg.start_time + 100
    seq = (Action(a, "click", t0), Action(b, "click", t0 + 60))
    data = [TrainingSequence(i, seq) for i in range(32)]
    m = model_for(tiny, tiny_vocab, small_encoder_cfg, negative_ratio=0.2, batch_size=32)
    inp = EncoderInput([seq[0]])
    before = full_softmax_probs(m, inp, tiny.catalog)[10]
    train_retrieval(m, data, tiny.catalog, epochs=60, lr=0.01)
    after = full_softmax_probs(m, inp, tiny.catalog)[10]
    assert after > 0.5 > before


def test_frozen_item_tower_trains_customer_side_only(tiny, tiny_vocab, small_encoder_cfg):
    m = model_for(tiny, tiny_vocab, small_encoder_cfg, item_trainable=False)
    before = {n: t.data.copy() for n, t in m.store.items()}
    train_retrieval(m, training_set(tiny), tiny.catalog, epochs=1)
    for n, t in m.store.items():
        changed = not np.array_equal(before[n], t.data)
        if n.startswith("item."):
            assert not changed, n
    assert not np.array_equal(before["customer.out.w"], m.store["customer.out.w"].data)
    assert not np.array_equal(before["bias.popularity"], m.store["bias.popularity"].data)


def test_training_is_deterministic(tiny, tiny_vocab, small_encoder_cfg):
    curves = []
    for _ in range(2):
        m = model_for(tiny, tiny_vocab, small_encoder_cfg, seed=5)
        curves.append(train_retrieval(m, training_set(tiny), tiny.catalog, epochs=2).batch_losses)
    assert curves[0] == curves[1]


def test_hard_negative_variant_trains(tiny, tiny_vocab, small_encoder_cfg):
    m = model_for(tiny, tiny_vocab, small_encoder_cfg, hard_negatives=True, negative_ratio=0.1)
    res = train_retrieval(m, training_set(tiny), tiny.catalog, epochs=2)
    assert all(np.isfinite(res.epoch_losses))


def test_customer_embedding_contract(tiny, tiny_vocab, small_encoder_cfg):
    m = model_for(tiny, tiny_vocab, small_encoder_cfg)
    cold = embed_customer(m, (), None, None, tiny.catalog)
    assert np.all(np.isfinite(cold))
    hist = tiny.actions[1]
    a = embed_customer(m, hist, tiny.global_ctx[1], LocalContext(1), tiny.catalog)
    b = embed_customer(m, hist, tiny.global_ctx[1], LocalContext(2), tiny.catalog)
    assert not np.allclose(a, b)
    assert np.array_equal(a, embed_customer(m, hist, tiny.global_ctx[1], LocalContext(1), tiny.catalog))


def test_scores_scale_with_customer_vector(tiny, tiny_vocab, small_encoder_cfg):
    m = model_for(tiny, tiny_vocab, small_encoder_cfg)
    emb = export_item_embeddings(m, tiny.catalog)
    u = embed_customer(m, tiny.actions[1], None, None, tiny.catalog)
    s = emb.vectors.astype(np.float64) @ u
    s3 = emb.vectors.astype(np.float64) @ (3.0 * u)
    np.testing.assert_allclose(s3, 3.0 * s, rtol=1e-12)
    assert np.array_equal(np.argsort(-s, kind="stable"), np.argsort(-s3, kind="stable"))


def test_export_cardinality_determinism_and_growth(tmp_path, tiny, tiny_vocab, small_encoder_cfg):
    m = model_for(tiny, tiny_vocab, small_encoder_cfg)
    e1 = export_item_embeddings(m, tiny.catalog)
    assert len(e1) == len(tiny.catalog) and e1.model_version == "v1"
    e1.save(tmp_path / "a.rke")
    export_item_embeddings(m, tiny.catalog).save(tmp_path / "b.rke")
    assert (tmp_path / "a.rke").read_bytes() == (tmp_path / "b.rke").read_bytes()
    it = tiny.catalog.items[0]
    new = Item(99999, it.brand_id, it.category_id, 1, 1, 1, it.visual_vector, it.activation_time, 10**6)
    grown = export_item_embeddings(m, tiny.catalog.with_items([new]))
    assert len(grown) == len(e1) + 1
    rows = {int(i): r for r, i in enumerate(grown.item_ids)}
    for r, i in enumerate(e1.item_ids):
        np.testing.assert_array_equal(grown.vectors[rows[int(i)]], e1.vectors[r])
    back = EmbeddingSet.load(tmp_path / "a.rke")
    assert back.model_version == "v1"
    np.testing.assert_array_equal(back.vectors, e1.vectors)


def test_checkpoint_roundtrip(tmp_path, tiny, tiny_vocab, small_encoder_cfg):
    m = model_for(tiny, tiny_vocab, small_encoder_cfg, item_trainable=False)
    m.save(tmp_path / "tt.rkf")
    back = TwoTowerModel.load(tmp_path / "tt.rkf", tiny.catalog)
    assert back.version == "v1" and back.cfg == m.cfg
    u1 = embed_customer(m, tiny.actions[2], None, None, tiny.catalog)
    u2 = embed_customer(back, tiny.actions[2], None, None, tiny.catalog)
    np.testing.assert_allclose(u1, u2, atol=1e-5)
