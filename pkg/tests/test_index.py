import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rankplat.index import (IndexPair, IndexParams, SwapError, VersionMismatchError, build_index, query_topk,
                            stage_and_swap, upsert_item)
from rankplat.retrieval import EmbeddingSet


def emb(vectors, version="v1", ids=None):
    vectors = np.asarray(vectors, dtype=np.float32)
    ids = np.arange(1, len(vectors) + 1) if ids is None else np.asarray(ids)
    return EmbeddingSet(version, ids.astype(np.int64), vectors)


def brute(vectors, ids, q, k):
    s = vectors @ q
    order = np.lexsort((ids, -s))[:k]
    return ids[order]


@pytest.mark.parametrize("mode", ["exact", "approximate"])
def test_singleton(mode):
    idx = build_index(emb([[0.3, -2.0]]), mode)
    for q in ([1, 0], [-5, 3]):
        ids, _ = idx.search(q, 5)
        assert ids.tolist() == [1]


def test_orthonormal_identity():
    idx = build_index(emb(np.eye(3)))
    ids, scores = idx.search([0, 1, 0], 1)
    assert ids.tolist() == [2] and scores[0] == pytest.approx(1.0)


def test_hand_2d_vectors():
    vecs = [[0.5, 3], [2.0, -1], [-1, 0], [1.5, 9], [0.1, 0]]
    out = query_topk(build_index(emb(vecs)), [1, 0], 2)
    assert [s.item_id for s in out] == [2, 4]
    assert [s.blended_score for s in out] == pytest.approx([2.0, 1.5])


def test_k_beyond_catalog_returns_everything_sorted():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(7, 3))
    ids, scores = build_index(emb(v)).search(rng.normal(size=3), 50)
    assert len(ids) == 7 and np.all(np.diff(scores) <= 0)


def test_filters():
    v = np.random.default_rng(1).normal(size=(20, 4))
    cats = {i: i % 3 for i in range(1, 21)}
    idx = build_index(emb(v), categories=cats)
    ids, _ = idx.search(np.ones(4), 5, category=99)
    assert len(ids) == 0
    full, _ = idx.search(np.ones(4), 20)
    for c in range(3):
        sub, _ = idx.search(np.ones(4), 20, category=c)
        assert sub.tolist() == [i for i in full.tolist() if cats[i] == c]


def test_build_errors():
    with pytest.raises(ValueError):
        build_index(emb(np.zeros((0, 3))))
    with pytest.raises(ValueError):
        build_index({1: [1.0, 2.0], 2: [1.0]}, model_version="v")
    idx = build_index(emb(np.eye(2)))
    with pytest.raises(ValueError):
        idx.search([1, 0, 0], 1)
    with pytest.raises(ValueError):
        idx.search([1, 0], 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(1, 6), st.integers(1, 40), st.integers(0, 10_000))
def test_exact_matches_brute_force(n, d, k, seed):
    rng = np.random.default_rng(seed)
    # rounding creates ties, which must break by ascending id
    v = np.round(rng.normal(size=(n, d)), 1).astype(np.float32)
    ids = rng.permutation(1000)[:n].astype(np.int64)
    q = np.round(rng.normal(size=d), 1).astype(np.float32)
    got, _ = build_index(emb(v, ids=ids)).search(q, k)
    assert got.tolist() == brute(v, ids, q, k).tolist()


def test_approximate_recall_small():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(2000, 16))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    e = emb(v)
    ex, ap = build_index(e), build_index(e, "approximate")
    hits = 0
    for q in rng.normal(size=(50, 16)):
        hits += len(set(ex.search(q, 10)[0]) & set(ap.search(q, 10)[0]))
    assert hits / 500 >= 0.95


def test_approximate_filter_falls_back_when_short():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(300, 8))
    cats = {i: int(i == 7) for i in range(1, 301)}
    idx = build_index(emb(v), "approximate", cats, IndexParams(m=4, ef_construction=20, ef_search=4))
    assert idx.search(-v[6], 5, category=1)[0].tolist() == [7]


def test_upsert():
    idx = build_index(emb(np.eye(3)))
    v = np.array([0.0, 0.0, 5.0])
    up = upsert_item(idx, 9, v, "v1")
    assert len(up) == 4 and len(idx) == 3
    assert up.search(v, 1)[0].tolist() == [9]
    rep = upsert_item(up, 2, [0, 0, 9], "v1")
    assert len(rep) == 4 and rep.search(v, 1)[0].tolist() == [2]
    with pytest.raises(VersionMismatchError):
        upsert_item(idx, 9, v, "v2")
    with pytest.raises(ValueError):
        upsert_item(idx, 9, [1.0, 2.0], "v1")


def test_upsert_into_graph():
    rng = np.random.default_rng(4)
    idx = build_index(emb(rng.normal(size=(200, 8))), "approximate")
    v = rng.normal(size=8) * 10
    assert upsert_item(idx, 999, v, "v1").search(v, 1)[0].tolist() == [999]
    assert upsert_item(idx, 5, v, "v1").search(v, 1)[0].tolist() == [5]


def test_embedding_version_must_match():
    with pytest.raises(VersionMismatchError):
        build_index(emb(np.eye(2), "v1"), model_version="v2")


def test_pair_swap_semantics():
    pair = IndexPair(build_index(emb(np.eye(2), "v1")))
    with pytest.raises(SwapError):
        pair.swap()
    with pytest.raises(SwapError):
        pair.stage(build_index(emb(np.eye(2), "v1")))
    stage_and_swap(pair, build_index(emb(-np.eye(2), "v2")))
    version, ids, scores = pair.search([1, 0], 1)
    assert version == "v2" and scores[0] == pytest.approx(0.0)
    with pytest.raises(VersionMismatchError):
        pair.upsert(3, [1, 1], "v1")
    pair.upsert(3, [1, 1], "v2")
    assert pair.search([1, 0], 1)[1].tolist() == [3]


def test_pair_readers_never_mix_versions():
    # version k stores every vector as k * ones, so one result set must carry a single k
    def version(k):
        return build_index(emb(np.full((50, 4), float(k)), f"v{k}"))

    pair = IndexPair(version(1))
    bad, stop = [], threading.Event()

    def reader():
        while not stop.is_set():
            tag, _, scores = pair.search(np.ones(4), 10)
            k = int(tag[1:])
            if not np.allclose(scores, 4 * k):
                bad.append(tag)

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for k in range(2, 12):
        stage_and_swap(pair, version(k))
    stop.set()
    for t in threads:
        t.join()
    assert not bad and pair.active.model_version == "v11"


@pytest.mark.parametrize("mode", ["exact", "approximate"])
def test_save_load(tmp_path, mode):
    rng = np.random.default_rng(2)
    idx = build_index(emb(rng.normal(size=(60, 5)), "vX"), mode, {i: i % 4 for i in range(1, 61)})
    idx.save(tmp_path / "ix")
    back = type(idx).load(tmp_path / "ix")
    q = rng.normal(size=5)
    assert back.model_version == "vX" and back.mode == mode
    assert back.search(q, 7, 2)[0].tolist() == idx.search(q, 7, 2)[0].tolist()
