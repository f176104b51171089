import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rankplat import nn
from rankplat.domain import GlobalContext, LocalContext
from rankplat.ranking import (HEADS, HeadWeights, RankerConfig, RankerModel, RankingExample, blend,
                              multi_task_loss, sample_training_candidates, score_candidates, score_matrix,
                              train_ranker)


@pytest.fixture
def ranker(tiny, tiny_vocab, small_encoder_cfg):
    return RankerModel(RankerConfig(encoder=small_encoder_cfg, head_hidden=6, head_dim=4, seed=3),
                       tiny.catalog, tiny_vocab, "r1")


def examples(tiny, n=30):
    from rankplat.evaluation import ranking_examples, requests_from_pages
    return ranking_examples(requests_from_pages(tiny.pages, tiny.actions))[:n]


# -- blend --------------------------------------------------------------------


def test_blend_hand_values():
    probs = {"click": 0.2, "add_to_wishlist": 0.4, "add_to_cart": 0.1, "purchase": 0.3}
    w = {"click": 1, "add_to_wishlist": 2, "add_to_cart": 1, "purchase": 1}
    assert blend(probs, w) == pytest.approx(1.4)
    assert blend(probs, {"click": 1.0}) == pytest.approx(0.2)
    assert blend(np.full(4, 0.3), HeadWeights()) == pytest.approx(10 * 0.3)


def test_head_weights_validation():
    with pytest.raises(ValueError):
        HeadWeights({"click": -1.0})
    with pytest.raises(ValueError):
        HeadWeights({"click": 0.0})
    with pytest.raises(ValueError):
        HeadWeights({"likes": 1.0})


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.integers(0, 3), st.floats(1e-3, 0.5))
def test_blend_is_monotone_per_head(p, h, bump):
    p = np.array(p)
    q = p.copy()
    q[h] += bump
    w = HeadWeights()
    assert blend(q, w) > blend(p, w)


def test_blend_order_invariant_to_weight_scale():
    rng = np.random.default_rng(0)
    probs = rng.random((50, 4))
    w = HeadWeights({"click": 1, "add_to_wishlist": 0.5, "add_to_cart": 3, "purchase": 2})
    w7 = HeadWeights({h: 7 * v for h, v in w.items()})
    assert np.array_equal(np.argsort(-blend(probs, w), kind="stable"), np.argsort(-blend(probs, w7), kind="stable"))


# -- loss ---------------------------------------------------------------------


def test_loss_at_half_is_four_ln2():
    assert float(multi_task_loss(np.full((1, 4), 0.5), np.ones((1, 4))).data) == pytest.approx(4 * math.log(2))


def test_loss_at_optimum_is_near_zero():
    y = np.array([[1, 0, 1, 0], [0, 0, 0, 1]], dtype=float)
    assert float(multi_task_loss(y, y).data) < 1e-5


def test_loss_hand_evaluation():
    f = np.array([[0.9, 0.2, 0.5, 0.1], [0.3, 0.6, 0.4, 0.7]])
    y = np.array([[1, 0, 1, 0], [0, 1, 0, 0]], dtype=float)
    expected = -np.sum(y * np.log(f) + (1 - y) * np.log(1 - f)) / 2
    assert float(multi_task_loss(f, y).data) == pytest.approx(expected, rel=1e-12)


def test_ranker_loss_gradients():
    from rankplat.diagnostics import GRAD_TOLERANCE, _model_checks, tiny_corpus
    fn, params, reset = _model_checks(tiny_corpus(4), 4)["ranker_loss"]
    rng = np.random.default_rng(2)
    reset(rng)
    assert nn.grad_check(fn, params, max_entries=3, rng=rng) < GRAD_TOLERANCE


# -- negative sampling ----------------------------------------------------------


@pytest.mark.parametrize("n, expected", [(10, 10), (5, 5)])
def test_negative_counts(n, expected):
    labels = np.zeros((n, 4))
    labels[[0, 3], 0] = 1
    sel = sample_training_candidates(labels, 4, np.random.default_rng(0))
    assert len(sel) == expected
    assert {0, 3} <= set(sel.tolist())
    assert len(set(sel.tolist())) == len(sel)


# -- scoring ------------------------------------------------------------------


def test_fixed_position_scores_ignore_observed_positions(ranker, tiny):
    cands = tiny.catalog.ids[:12]
    hist = tiny.actions[1]
    ref = score_matrix(ranker, hist, GlobalContext(1, 1), LocalContext(1), cands, tiny.catalog)
    for perm in (np.arange(12)[::-1], np.random.default_rng(0).integers(0, 500, 12)):
        got = score_matrix(ranker, hist, GlobalContext(1, 1), LocalContext(1), cands, tiny.catalog, positions=perm)
        assert np.array_equal(got, ref)
    observed = score_matrix(ranker, hist, GlobalContext(1, 1), LocalContext(1), cands, tiny.catalog,
                            positions=np.arange(12) * 30, position_mode="observed")
    assert not np.array_equal(observed, ref)


def test_duplicate_candidates_score_identically(ranker, tiny):
    ids = tiny.catalog.ids
    cands = np.array([ids[4], ids[7], ids[4]])
    s = score_matrix(ranker, tiny.actions[2], None, None, cands, tiny.catalog)
    assert np.array_equal(s[0], s[2])


def test_single_candidate_summary_is_its_embedding(ranker, tiny):
    i = tiny.catalog.ids[5:6]
    toks = ranker.encoder.build_token_sequence(
        __import__("rankplat.domain", fromlist=["CustomerSequence"]).CustomerSequence(1, ()), GlobalContext(),
        LocalContext(), tiny.catalog, summary_ids=i)
    np.testing.assert_allclose(toks.matrix.data[2], ranker.encoder.item_tokens(i, tiny.catalog).data[0])


def test_score_candidates_blends_heads(ranker, tiny):
    cands = tiny.catalog.ids[:5]
    scored = score_candidates(ranker, tiny.actions[3], None, None, cands, tiny.catalog)
    assert [s.item_id for s in scored] == cands.tolist()
    for s in scored:
        assert set(s.head_probabilities) == set(HEADS)
        assert s.blended_score == pytest.approx(blend(s.head_probabilities, HeadWeights()))


def test_training_reduces_loss_and_is_deterministic(tiny, tiny_vocab, small_encoder_cfg):
    runs = []
    for _ in range(2):
        m = RankerModel(RankerConfig(encoder=small_encoder_cfg, head_hidden=6, head_dim=4, batch_size=8),
                        tiny.catalog, tiny_vocab, "r")
        runs.append(train_ranker(m, examples(tiny, 60), tiny.catalog, epochs=4, lr=0.01))
    assert runs[0].batch_losses == runs[1].batch_losses
    assert runs[0].epoch_losses[-1] < runs[0].epoch_losses[0]


def test_no_branch_model_freezes_position_parameters(tiny, tiny_vocab, small_encoder_cfg):
    m = RankerModel(RankerConfig(encoder=small_encoder_cfg, head_hidden=6, head_dim=4, use_position_branch=False),
                    tiny.catalog, tiny_vocab, "r")
    before = m.store["position.w1"].data.copy()
    train_ranker(m, examples(tiny), tiny.catalog, epochs=1)
    assert np.array_equal(before, m.store["position.w1"].data)


def test_save_load_roundtrip(tmp_path, ranker, tiny):
    ranker.save(tmp_path / "rk.rkf")
    back = RankerModel.load(tmp_path / "rk.rkf")
    assert back.version == "r1" and back.cfg == ranker.cfg
    cands = tiny.catalog.ids[:6]
    a = score_matrix(ranker, tiny.actions[1], None, None, cands, tiny.catalog)
    b = score_matrix(back, tiny.actions[1], None, None, cands, tiny.catalog)
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_example_validation():
    with pytest.raises(ValueError):
        RankingExample((), np.array([1, 2]), np.zeros((3, 4)), np.arange(2))
