"""Final page composition: fresh-item exploration, purchase demotion, brand diversity.

All functions are pure permutations of their input apart from the injected
random generator used by ``mix_new_items``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .domain import Action, Catalog, RankedList, ScoredItem

DAY = 86400
CONTENT_FLOOR = 1e-3


@dataclass(frozen=True)
class PolicyConfig:
    k: int = 7
    epsilon: float = 0.1
    max_brand_run: int = 3
    purchase_window_seconds: int = 60 * DAY
    freshness_window_seconds: int = 14 * DAY

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_brand_run < 1:
            raise ValueError("max_brand_run must be >= 1")


@dataclass
class CandidatePools:
    """Organic ranked items S and new items N; ``blended_score`` is the relevance."""

    organic: list[ScoredItem] = field(default_factory=list)
    new: list[ScoredItem] = field(default_factory=list)

    def __post_init__(self):
        s_ids = [s.item_id for s in self.organic]
        n_ids = [s.item_id for s in self.new]
        if len(set(s_ids)) != len(s_ids) or len(set(n_ids)) != len(n_ids):
            raise ValueError("duplicate item within a pool")
        if set(s_ids) & set(n_ids):
            raise ValueError("organic and new pools must be disjoint")
        for s in (*self.organic, *self.new):
            if not s.blended_score > 0:
                raise ValueError(f"relevance of item {s.item_id} must be > 0, got {s.blended_score}")


def mix_new_items(pools: CandidatePools, cfg: PolicyConfig, rng: np.random.Generator) -> RankedList:
    """Epsilon-greedy blend of organic and new items.

    Slots 1..k-1 take the best remaining organic item. From slot k on, each slot
    explores with probability epsilon by drawing a new item with probability
    proportional to its relevance among the new items still unplaced; otherwise
    it takes the best remaining organic item. When the chosen pool is empty the
    slot falls through to the other pool's best remaining item.
    """
    organic = sorted(pools.organic, key=lambda s: -s.blended_score)  # stable: ties keep input order
    new = list(pools.new)
    new_rel = np.array([s.blended_score for s in new], dtype=np.float64)
    by_rel = np.argsort(-new_rel, kind="stable").tolist()
    alive = np.ones(len(new), dtype=bool)
    total = len(organic) + len(new)
    # one coin per slot from k on, drawn up front
    coins = (rng.random(max(total - cfg.k + 1, 0)) < cfg.epsilon).tolist() if cfg.epsilon > 0 else []
    out: list[ScoredItem] = []
    si = bi = 0
    n_alive = len(new)
    for slot in range(1, total + 1):
        explore = bool(coins) and slot >= cfg.k and coins[slot - cfg.k]
        if explore and n_alive:
            idx = np.flatnonzero(alive)
            cdf = np.cumsum(new_rel[idx])
            j = int(idx[min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(idx) - 1)])
        elif si < len(organic):
            out.append(organic[si])
            si += 1
            continue
        else:
            while not alive[by_rel[bi]]:
                bi += 1
            j = by_rel[bi]
        alive[j] = False
        n_alive -= 1
        out.append(new[j])
    return RankedList(out)


def purchase_times(history: Iterable[Action] | Mapping[int, int]) -> dict[int, int]:
    """item_id -> most recent purchase timestamp."""
    if isinstance(history, Mapping):
        return {int(k): int(v) for k, v in history.items()}
    out: dict[int, int] = {}
    for a in history:
        if a.action_type == "purchase":
            out[a.item_id] = max(out.get(a.item_id, a.timestamp), a.timestamp)
    return out


def downrank_purchased(ranked: Sequence[ScoredItem], purchase_history, cfg: PolicyConfig, now: int) -> RankedList:
    """Move items bought within the purchase window to the tail, preserving order in both groups."""
    bought = purchase_times(purchase_history)
    keep, demote = [], []
    for s in ranked:
        t = bought.get(s.item_id)
        recent = t is not None and 0 <= now - t <= cfg.purchase_window_seconds
        (demote if recent else keep).append(s)
    return RankedList(keep + demote)


def brand_diversity_pass(ranked: Sequence[ScoredItem], brand_of: Mapping[int, int] | Callable[[int], int],
                         max_run: int) -> RankedList:
    """Break same-brand runs longer than ``max_run`` by pulling the next differing-brand item forward."""
    if max_run < 1:
        raise ValueError("max_run must be >= 1")
    lookup = brand_of if callable(brand_of) else (lambda i: brand_of.get(i))
    items = list(ranked)
    brands = [lookup(s.item_id) for s in items]
    run = 0
    for i in range(len(items)):
        if i and brands[i] == brands[i - 1]:
            run += 1
        else:
            run = 1
        if run <= max_run:
            continue
        b = brands[i - 1]
        j = next((j for j in range(i + 1, len(items)) if brands[j] != b), None)
        if j is None:
            break
        items.insert(i, items.pop(j))
        brands.insert(i, brands.pop(j))
        run = 1
    return RankedList(items)


def content_relevance(meta_tables: Sequence[np.ndarray], catalog: Catalog, history_ids: Sequence[int],
                      new_ids: Sequence[int], floor: float = CONTENT_FLOOR) -> np.ndarray:
    """Dot product of each new item's metadata embedding with the mean history embedding, floored."""
    new_ids = np.asarray(new_ids, dtype=np.int64)
    if not len(new_ids):
        return np.zeros(0)

    def embed(ids):
        rows = catalog.rows(ids)
        safe = np.maximum(rows, 0)
        parts = []
        for f, table in zip(Catalog.FIELDS, meta_tables):
            codes = catalog.attrs[f][safe]
            codes = np.where((rows >= 0) & (codes >= 0) & (codes < len(table)), codes, 0)
            parts.append(table[codes])
        return np.concatenate(parts, axis=1)

    hist = np.asarray(history_ids, dtype=np.int64)
    if not len(hist):
        return np.full(len(new_ids), floor)
    profile = embed(hist).mean(axis=0)
    return np.maximum(embed(new_ids) @ profile, floor)


def new_item_ids(catalog: Catalog, now: int, cfg: PolicyConfig) -> np.ndarray:
    age = now - catalog.activation_time
    return catalog.ids[(age >= 0) & (age <= cfg.freshness_window_seconds)]


def compose_page(pools: CandidatePools, cfg: PolicyConfig, rng: np.random.Generator,
                 purchase_history, now: int, brand_of) -> RankedList:
    """mix -> purchase demotion -> brand diversity."""
    mixed = mix_new_items(pools, cfg, rng)
    demoted = downrank_purchased(mixed, purchase_history, cfg, now)
    return brand_diversity_pass(demoted, brand_of, cfg.max_brand_run)
