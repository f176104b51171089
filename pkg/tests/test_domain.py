import numpy as np
import pytest
from hypothesis import given, strategies as st

from rankplat.domain import (Action, Catalog, CustomerSequence, Item, LocalContext, RankedList, ScoredItem,
                             action_from_record, action_to_record, read_catalog, read_events, read_jsonl,
                             truncate_sequence, validate_catalog, write_catalog, write_jsonl)


def seq_of(timestamps, cid=1):
    return CustomerSequence(cid, tuple(Action(100 + i, "click", t) for i, t in enumerate(timestamps)))


def item(item_id, d=4, rank=None, **kw):
    return Item(item_id, kw.get("brand", 1), kw.get("category", 1), 1, 1, 1, (0.1,) * d, 0,
                item_id if rank is None else rank)


def test_truncate_keeps_newest():
    s = seq_of(range(120))
    t = truncate_sequence(s, 100)
    assert len(t) == 100
    assert [a.timestamp for a in t.actions] == list(range(20, 120))


def test_truncate_short_sequence_is_identity():
    s = seq_of(range(5))
    assert truncate_sequence(s, 100) == s


def test_truncate_hand_suffix():
    assert [a.timestamp for a in truncate_sequence(seq_of([1, 2, 3]), 2).actions] == [2, 3]


@given(st.lists(st.integers(0, 10**6), max_size=40), st.integers(1, 30))
def test_truncate_idempotent_and_order_preserving(ts, m):
    s = seq_of(sorted(ts))
    once = truncate_sequence(s, m)
    assert truncate_sequence(once, m) == once
    assert list(once.actions) == list(s.actions[-m:]) if s.actions else once.actions == ()


def test_sequence_rejects_unordered_timestamps():
    with pytest.raises(ValueError):
        seq_of([3, 1])


def test_validate_catalog_cases():
    assert validate_catalog([]).ok
    rep = validate_catalog([item(7), item(7, rank=9)])
    assert rep.duplicate_item_ids == [7]
    rep = validate_catalog([item(1, d=8), item(2, d=3)], d_pre=8)
    assert rep.bad_dimension_ids == [2]


def test_action_type_is_closed():
    with pytest.raises(ValueError):
        Action(1, "like", 0)


def test_search_query_requires_search_flag():
    with pytest.raises(ValueError):
        LocalContext(search_query_id=3)


def test_ranked_list_rejects_duplicates():
    with pytest.raises(ValueError):
        RankedList([ScoredItem(1), ScoredItem(1)])


def test_catalog_rows_and_unknown_ids():
    cat = Catalog([item(5), item(3), item(9)])
    np.testing.assert_array_equal(cat.rows([3, 9, 4]), [1, 2, -1])
    assert 5 in cat and 4 not in cat


def test_jsonl_roundtrip(tmp_path):
    items = [item(1, category=2), item(2, brand=3)]
    write_catalog(tmp_path / "c.jsonl", items)
    assert read_catalog(tmp_path / "c.jsonl").items == items
    ctx = LocalContext(4, False, None, (1, 2))
    a = Action(1, "add_to_cart", 50, ctx)
    rec = action_to_record(9, a)
    assert action_from_record(rec) == a
    write_jsonl(tmp_path / "e.jsonl", [action_to_record(9, Action(2, "click", 60)), rec])
    acts, _ = read_events(tmp_path / "e.jsonl")
    assert [x.timestamp for x in acts[9]] == [50, 60]


def test_malformed_jsonl_names_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"a": 1}\n{oops\n')
    with pytest.raises(ValueError, match=":2:"):
        list(read_jsonl(p))
