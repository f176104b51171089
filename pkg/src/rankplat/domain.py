"""Shared vocabulary: items, actions, contexts, sequences and ranked outputs.

Categorical codes use 0 as the reserved "unknown" value in every vocabulary.
Timestamps are integer seconds since the Unix epoch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

ACTION_TYPES: tuple[str, ...] = ("click", "add_to_wishlist", "add_to_cart", "purchase")
ACTION_INDEX = {name: i for i, name in enumerate(ACTION_TYPES)}
HIGH_VALUE_ACTIONS = frozenset({"add_to_wishlist", "add_to_cart"})
MAX_SEQUENCE_LENGTH = 100
UNKNOWN = 0


@dataclass(frozen=True)
class Item:
    item_id: int
    brand_id: int
    category_id: int
    color_id: int
    material_id: int
    pattern_id: int
    visual_vector: tuple[float, ...]
    activation_time: int
    popularity_rank: int


@dataclass(frozen=True)
class LocalContext:
    browse_category_id: int | None = None
    is_search: bool = False
    search_query_id: int | None = None
    page_item_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.search_query_id is not None and not self.is_search:
            raise ValueError("search_query_id requires is_search=True")


EMPTY_CONTEXT = LocalContext()


@dataclass(frozen=True)
class GlobalContext:
    country_id: int = UNKNOWN
    device_type_id: int = UNKNOWN


@dataclass(frozen=True)
class Action:
    item_id: int
    action_type: str
    timestamp: int
    context: LocalContext | None = None

    def __post_init__(self):
        if self.action_type not in ACTION_INDEX:
            raise ValueError(f"unknown action type {self.action_type!r}")


@dataclass(frozen=True)
class CustomerSequence:
    customer_id: int
    actions: tuple[Action, ...] = ()

    def __post_init__(self):
        ts = [a.timestamp for a in self.actions]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("actions must be ordered by timestamp")

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class ScoredItem:
    item_id: int
    head_probabilities: Mapping[str, float] = field(default_factory=dict)
    blended_score: float = 0.0


class RankedList(list):
    """An ordered list of ScoredItem without duplicate ids."""

    def __init__(self, items: Iterable[ScoredItem] = ()):
        super().__init__(items)
        ids = [s.item_id for s in self]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate item_id in ranked list")

    @property
    def item_ids(self) -> list[int]:
        return [s.item_id for s in self]


def truncate_sequence(seq: CustomerSequence, max_len: int = MAX_SEQUENCE_LENGTH) -> CustomerSequence:
    """Keep the ``max_len`` most recent actions."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if len(seq.actions) <= max_len:
        return seq
    return CustomerSequence(seq.customer_id, seq.actions[-max_len:])


@dataclass
class ValidationReport:
    duplicate_item_ids: list[int] = field(default_factory=list)
    bad_dimension_ids: list[int] = field(default_factory=list)
    duplicate_popularity_ranks: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.duplicate_item_ids or self.bad_dimension_ids or self.duplicate_popularity_ranks)


def validate_catalog(items: Iterable[Item], d_pre: int | None = None) -> ValidationReport:
    items = list(items)
    report = ValidationReport()
    if d_pre is None and items:
        d_pre = len(items[0].visual_vector)
    seen_ids: set[int] = set()
    seen_ranks: set[int] = set()
    for it in items:
        if it.item_id in seen_ids and it.item_id not in report.duplicate_item_ids:
            report.duplicate_item_ids.append(it.item_id)
        seen_ids.add(it.item_id)
        if len(it.visual_vector) != d_pre:
            report.bad_dimension_ids.append(it.item_id)
        if it.popularity_rank in seen_ranks and it.popularity_rank not in report.duplicate_popularity_ranks:
            report.duplicate_popularity_ranks.append(it.popularity_rank)
        seen_ranks.add(it.popularity_rank)
    return report


class Catalog:
    """Column view of a catalog snapshot for vectorized feature lookup."""

    FIELDS = ("brand_id", "category_id", "color_id", "material_id", "pattern_id")

    def __init__(self, items: Sequence[Item]):
        report = validate_catalog(items)
        if report.duplicate_item_ids or report.bad_dimension_ids:
            raise ValueError(f"invalid catalog: {report}")
        self.items = list(items)
        n = len(self.items)
        self.d_pre = len(self.items[0].visual_vector) if n else 0
        self.ids = np.array([it.item_id for it in self.items], dtype=np.int64)
        self.attrs = {f: np.array([getattr(it, f) for it in self.items], dtype=np.int64) for f in self.FIELDS}
        self.visual = np.array([it.visual_vector for it in self.items], dtype=np.float64).reshape(n, self.d_pre)
        self.activation_time = np.array([it.activation_time for it in self.items], dtype=np.int64)
        self.popularity_rank = np.array([it.popularity_rank for it in self.items], dtype=np.int64)
        self._order = np.argsort(self.ids, kind="stable")
        self._sorted = self.ids[self._order]
        self._by_id = {it.item_id: it for it in self.items}

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, item_id: int) -> bool:
        return item_id in self._by_id

    def __getitem__(self, item_id: int) -> Item:
        return self._by_id[item_id]

    @property
    def category(self) -> np.ndarray:
        return self.attrs["category_id"]

    @property
    def brand(self) -> np.ndarray:
        return self.attrs["brand_id"]

    def rows(self, item_ids) -> np.ndarray:
        """Row positions for ``item_ids``; -1 where the id is not in the catalog."""
        ids = np.asarray(item_ids, dtype=np.int64)
        if not len(self):
            return np.full(ids.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted, ids)
        pos = np.clip(pos, 0, len(self._sorted) - 1)
        found = self._sorted[pos] == ids
        return np.where(found, self._order[pos], -1)

    def with_items(self, new_items: Iterable[Item]) -> "Catalog":
        """A new snapshot with ``new_items`` added or replaced by id."""
        merged = {it.item_id: it for it in self.items}
        for it in new_items:
            merged[it.item_id] = it
        return Catalog(list(merged.values()))


# ---------------------------------------------------------------------------
# line-delimited JSON


def item_to_record(it: Item) -> dict:
    rec = {f: getattr(it, f) for f in ("item_id", *Catalog.FIELDS, "activation_time", "popularity_rank")}
    rec["visual_vector"] = [round(float(v), 6) for v in it.visual_vector]
    return rec


def item_from_record(rec: Mapping) -> Item:
    return Item(
        item_id=int(rec["item_id"]),
        brand_id=int(rec.get("brand_id", UNKNOWN)),
        category_id=int(rec.get("category_id", UNKNOWN)),
        color_id=int(rec.get("color_id", UNKNOWN)),
        material_id=int(rec.get("material_id", UNKNOWN)),
        pattern_id=int(rec.get("pattern_id", UNKNOWN)),
        visual_vector=tuple(float(v) for v in rec["visual_vector"]),
        activation_time=int(rec.get("activation_time", 0)),
        popularity_rank=int(rec.get("popularity_rank", 0)),
    )


def context_to_record(ctx: LocalContext | None) -> dict:
    if ctx is None:
        return {}
    rec: dict = {"is_search": ctx.is_search}
    if ctx.browse_category_id is not None:
        rec["browse_category_id"] = ctx.browse_category_id
    if ctx.search_query_id is not None:
        rec["search_query_id"] = ctx.search_query_id
    if ctx.page_item_ids:
        rec["page_item_ids"] = list(ctx.page_item_ids)
    return rec


def context_from_record(rec: Mapping) -> LocalContext | None:
    if not any(k in rec for k in ("is_search", "browse_category_id", "search_query_id", "page_item_ids")):
        return None
    bc = rec.get("browse_category_id")
    q = rec.get("search_query_id")
    return LocalContext(
        browse_category_id=None if bc is None else int(bc),
        is_search=bool(rec.get("is_search", False)),
        search_query_id=None if q is None else int(q),
        page_item_ids=tuple(int(i) for i in rec.get("page_item_ids", ())),
    )


def action_to_record(customer_id: int, action: Action, g: GlobalContext | None = None) -> dict:
    rec = {"customer_id": customer_id, "item_id": action.item_id,
           "action_type": action.action_type, "timestamp": action.timestamp}
    if g is not None:
        rec["country_id"] = g.country_id
        rec["device_type_id"] = g.device_type_id
    rec.update(context_to_record(action.context))
    return rec


def action_from_record(rec: Mapping) -> Action:
    return Action(
        item_id=int(rec["item_id"]),
        action_type=str(rec["action_type"]),
        timestamp=int(rec["timestamp"]),
        context=context_from_record(rec),
    )


def write_jsonl(path, records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":"), sort_keys=True))
            fh.write("\n")


def read_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None


def read_catalog(path) -> Catalog:
    return Catalog([item_from_record(r) for r in read_jsonl(path)])


def write_catalog(path, items: Iterable[Item]) -> None:
    write_jsonl(path, (item_to_record(it) for it in items))


def read_events(path) -> tuple[dict[int, list[Action]], dict[int, GlobalContext]]:
    """Group an event file by customer; actions sorted by timestamp."""
    actions: dict[int, list[Action]] = {}
    contexts: dict[int, GlobalContext] = {}
    for rec in read_jsonl(Path(path)):
        cid = int(rec["customer_id"])
        actions.setdefault(cid, []).append(action_from_record(rec))
        if "country_id" in rec or "device_type_id" in rec:
            contexts[cid] = GlobalContext(int(rec.get("country_id", UNKNOWN)), int(rec.get("device_type_id", UNKNOWN)))
    for seq in actions.values():
        seq.sort(key=lambda a: a.timestamp)
    return actions, contexts
