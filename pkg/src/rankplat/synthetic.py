"""Synthetic customer-journey corpus with planted preference structure.

Each customer has a latent taste vector built from a few favourite category
centroids. Every session picks a category (browse) or a query inside one
(search), adds a per-session intent offset scaled by the drift strength, and
shows a logged page of category items ordered by popularity plus noise. The
customer examines positions with decaying probability and interacts with
items in proportion to exp(affinity); interactions escalate
click -> add_to_wishlist -> add_to_cart -> purchase.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .domain import (ACTION_TYPES, Action, Catalog, GlobalContext, Item, LocalContext, action_to_record,
                     read_jsonl, write_catalog, write_jsonl)

DAY = 86400
T0 = 1_700_000_000


@dataclass(frozen=True)
class GeneratorConfig:
    num_customers: int = 10_000
    num_items: int = 2_000
    num_brands: int = 50
    num_categories: int = 20
    latent_dim: int = 16
    visual_dim: int = 16
    num_colors: int = 12
    num_materials: int = 8
    num_patterns: int = 6
    num_countries: int = 5
    num_devices: int = 3
    queries_per_category: int = 5
    category_concentration: float = 20.0     # Dirichlet concentration of category sizes
    sessions_mean: float = 4.0              # sessions per customer: 1 + Poisson(mean - 1)
    interactions_mean: float = 4.1         # distinct items touched per session: 1 + Poisson(mean - 1)
    drift: float = 1.0                      # intent-drift strength
    escalation: tuple[float, float, float] = (0.2, 0.35, 0.3)   # P(a2w|click), P(a2c|a2w), P(purchase|a2c)
    popularity_exponent: float = 0.5
    affinity_temperature: float = 4.0
    search_rate: float = 0.3
    favourite_rate: float = 0.8             # sessions drawn from the customer's favourite categories
    page_size: int = 84
    position_decay: float = 5.0             # examination = (1 + position / decay) ** -position_power
    position_power: float = 0.5
    logging_noise: float = 2.0              # std of the noise added to log-popularity when ordering a page
    freshness_rate: float = 0.05
    span_days: int = 120
    test_days: int = 20
    seed: int = 0

    def __post_init__(self):
        counts = (self.num_customers, self.num_items, self.num_brands, self.num_categories, self.latent_dim,
                  self.visual_dim, self.num_colors, self.num_materials, self.num_patterns, self.page_size)
        if min(counts) < 1:
            raise ValueError("all counts must be >= 1")
        rates = (*self.escalation, self.search_rate, self.favourite_rate, self.freshness_rate)
        if any(not 0.0 < r < 1.0 for r in rates):
            raise ValueError("rates must lie in (0, 1)")
        if self.sessions_mean < 1 or self.interactions_mean < 1:
            raise ValueError("session count and length means must be >= 1")
        if not 0 < self.test_days < self.span_days:
            raise ValueError("test_days must lie inside the span")

    @property
    def start_time(self) -> int:
        return T0

    @property
    def split_time(self) -> int:
        return T0 + (self.span_days - self.test_days) * DAY

    @property
    def end_time(self) -> int:
        return T0 + self.span_days * DAY


@dataclass
class GroundTruth:
    customer_latent: np.ndarray      # [C, D]
    item_latent: np.ndarray          # [I, D] rows in catalog order
    item_ids: np.ndarray             # [I]
    session_intent: np.ndarray       # [S, D] per-session offset (already scaled by drift)
    session_customer: np.ndarray     # [S]
    session_time: np.ndarray         # [S]
    session_category: np.ndarray     # [S]
    brand_affinity: np.ndarray       # [C, B]
    popularity_weight: np.ndarray    # [I]
    category_centroids: np.ndarray   # [K, D]
    item_brand: np.ndarray           # [I] zero-based brand index

    def save(self, path) -> None:
        np.savez(path, **asdict(self))

    @classmethod
    def load(cls, path) -> "GroundTruth":
        with np.load(path) as z:
            return cls(**{k: z[k] for k in z.files})

    def intent(self, session: int) -> np.ndarray:
        return self.customer_latent[self.session_customer[session]] + self.session_intent[session]

    def affinity(self, session: int, item_ids, temperature: float) -> np.ndarray:
        """Log interaction weight of each item in a session, before position effects."""
        rows = np.searchsorted(self.item_ids, np.asarray(item_ids, dtype=np.int64))
        c = self.session_customer[session]
        D = self.item_latent.shape[1]
        return (temperature * (self.item_latent[rows] @ self.intent(session)) / math.sqrt(D)
                + np.log(self.popularity_weight[rows]) + self.brand_affinity[c, self.item_brand[rows]])


@dataclass
class Page:
    """A logged page: the session's premise, shown items in display order, and the resulting labels."""

    page_id: int
    customer_id: int
    timestamp: int
    context: LocalContext
    global_ctx: GlobalContext
    item_ids: tuple[int, ...]
    labels: dict[int, tuple[str, ...]] = field(default_factory=dict)

    def to_record(self) -> dict:
        ctx = self.context
        return {"page_id": self.page_id, "customer_id": self.customer_id, "timestamp": self.timestamp,
                "browse_category_id": ctx.browse_category_id, "is_search": ctx.is_search,
                "search_query_id": ctx.search_query_id, "country_id": self.global_ctx.country_id,
                "device_type_id": self.global_ctx.device_type_id, "item_ids": list(self.item_ids),
                "labels": {str(k): list(v) for k, v in sorted(self.labels.items())}}

    @classmethod
    def from_record(cls, rec: dict) -> "Page":
        bc, q = rec.get("browse_category_id"), rec.get("search_query_id")
        ctx = LocalContext(None if bc is None else int(bc), bool(rec.get("is_search", False)),
                           None if q is None else int(q))
        return cls(int(rec["page_id"]), int(rec["customer_id"]), int(rec["timestamp"]), ctx,
                   GlobalContext(int(rec.get("country_id", 0)), int(rec.get("device_type_id", 0))),
                   tuple(int(i) for i in rec["item_ids"]),
                   {int(k): tuple(v) for k, v in rec.get("labels", {}).items()})


@dataclass
class Corpus:
    cfg: GeneratorConfig
    items: list[Item]
    actions: dict[int, list[Action]]
    global_ctx: dict[int, GlobalContext]
    pages: list[Page]
    query_category: dict[int, int]
    truth: GroundTruth

    @property
    def catalog(self) -> Catalog:
        if not hasattr(self, "_catalog"):
            self._catalog = Catalog(self.items)
        return self._catalog


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(d), (n, d))


def _make_items(cfg: GeneratorConfig, rng: np.random.Generator):
    D, I, K, B = cfg.latent_dim, cfg.num_items, cfg.num_categories, cfg.num_brands
    centroids = _unit_rows(rng, K, D) * 1.5
    brand_vec = _unit_rows(rng, B, D) * 0.5
    cat_share = rng.dirichlet(np.full(K, cfg.category_concentration))
    category = rng.choice(K, size=I, p=cat_share)
    # brands specialise in a couple of categories
    brand_home = rng.integers(0, K, size=(B, 2))
    brand = np.empty(I, np.int64)
    for i in range(I):
        local = np.flatnonzero((brand_home == category[i]).any(axis=1))
        brand[i] = rng.choice(local) if len(local) and rng.random() < 0.8 else rng.integers(B)
    # within-category variation is orthogonal to the category centroid, so the
    # centroid part of a session intent does not make some items universally appealing
    spread = brand_vec[brand] + _unit_rows(rng, I, D)
    c = centroids[category]
    spread -= (np.sum(spread * c, axis=1) / np.sum(c * c, axis=1))[:, None] * c
    latent = c + spread
    proj = rng.normal(0.0, 1.0 / math.sqrt(D), (D, cfg.visual_dim))
    visual = latent @ proj + rng.normal(0.0, 0.3, (I, cfg.visual_dim))
    color = 1 + (np.abs(latent[:, 0] * 3).astype(np.int64) + rng.integers(0, 2, I)) % cfg.num_colors
    material = 1 + rng.integers(0, cfg.num_materials, I)
    pattern = 1 + (category + rng.integers(0, 2, I)) % cfg.num_patterns
    pop_rank = rng.permutation(I)
    pop_weight = (pop_rank + 1.0) ** -cfg.popularity_exponent
    fresh = rng.random(I) < cfg.freshness_rate
    lo = cfg.split_time - 14 * DAY
    activation = np.where(fresh, rng.integers(lo, cfg.end_time - DAY, I), cfg.start_time - 30 * DAY)
    ids = 1000 + np.arange(I, dtype=np.int64)
    items = [Item(int(ids[i]), int(brand[i]) + 1, int(category[i]) + 1, int(color[i]), int(material[i]),
                  int(pattern[i]), tuple(float(round(v, 6)) for v in visual[i]), int(activation[i]),
                  int(pop_rank[i])) for i in range(I)]
    return items, ids, latent, centroids, category, brand, pop_weight, activation


def generate(cfg: GeneratorConfig | None = None) -> Corpus:
    """Build the corpus in memory; ``write_corpus`` persists it."""
    cfg = cfg or GeneratorConfig()
    rng = np.random.default_rng(cfg.seed)
    items, ids, v, centroids, category, brand, pop_w, activation = _make_items(cfg, rng)
    C, K, D = cfg.num_customers, cfg.num_categories, cfg.latent_dim
    log_pop = np.log(pop_w)
    by_cat = [np.flatnonzero(category == k) for k in range(K)]
    n_queries = K * cfg.queries_per_category
    query_cat = np.repeat(np.arange(K), cfg.queries_per_category)
    query_vec = _unit_rows(rng, n_queries, D) * 0.7

    n_fav = rng.integers(1, min(4, K + 1), C)
    fav_mix = [rng.choice(K, size=n, replace=False) for n in n_fav]
    fav_w = [rng.dirichlet(np.ones(n)) for n in n_fav]
    u = np.stack([(w[:, None] * centroids[f]).sum(0) for f, w in zip(fav_mix, fav_w)]) * 0.5 \
        + _unit_rows(rng, C, D) * 0.7
    brand_aff = rng.normal(0.0, 0.5, (C, cfg.num_brands))
    country = rng.integers(1, cfg.num_countries + 1, C)
    device = rng.integers(1, cfg.num_devices + 1, C)

    actions: dict[int, list[Action]] = {}
    gctx: dict[int, GlobalContext] = {}
    pages: list[Page] = []
    s_intent, s_cust, s_time, s_cat = [], [], [], []
    exam = (1.0 + np.arange(cfg.page_size) / cfg.position_decay) ** -cfg.position_power
    esc = cfg.escalation
    span = cfg.end_time - cfg.start_time - DAY
    for c in range(C):
        cid = c + 1
        g = GlobalContext(int(country[c]), int(device[c]))
        gctx[cid] = g
        n_sess = 1 + rng.poisson(cfg.sessions_mean - 1)
        starts = np.sort(rng.choice(span // 60, size=n_sess, replace=False)) * 60 + cfg.start_time
        seq: list[Action] = []
        last_t = -1
        for t0 in starts:
            t0 = int(max(t0, last_t + 60))
            if rng.random() < cfg.favourite_rate:
                k = int(rng.choice(fav_mix[c], p=fav_w[c]))
            else:
                k = int(rng.integers(K))
            search = rng.random() < cfg.search_rate
            offset = centroids[k] + rng.normal(0.0, 0.5 / math.sqrt(D), D)
            qid = None
            if search:
                qid = int(rng.choice(np.flatnonzero(query_cat == k)))
                offset = offset + query_vec[qid]
            offset = cfg.drift * offset
            pool = by_cat[k][activation[by_cat[k]] <= t0]
            if not len(pool):
                continue
            order = np.argsort(-(log_pop[pool] + rng.normal(0.0, cfg.logging_noise, len(pool))), kind="stable")
            page = pool[order][: cfg.page_size]
            q = u[c] + offset
            aff = cfg.affinity_temperature * (v[page] @ q) / math.sqrt(D) + log_pop[page] + brand_aff[c, brand[page]]
            w = exam[: len(page)] * np.exp(aff - aff.max())
            n_touch = min(1 + rng.poisson(cfg.interactions_mean - 1), len(page))
            # sequential sampling without replacement via exponential keys
            keys = rng.exponential(size=len(page)) / w
            touched = np.argsort(keys, kind="stable")[:n_touch]
            z = (aff[touched] - aff.mean()) / (aff.std() + 1e-9)
            ctx = LocalContext(None if search else k + 1, bool(search), None if qid is None else qid + 1)
            sid = len(pages)
            labels: dict[int, tuple[str, ...]] = {}
            t = t0
            for pos, zz in zip(touched, z):
                lift = 2.0 / (1.0 + math.exp(-zz))    # in (0, 2): likelier escalation for high affinity
                kinds = ["click"]
                for p in esc:
                    if rng.random() < min(p * lift, 0.95):
                        kinds.append(ACTION_TYPES[len(kinds)])
                    else:
                        break
                item_id = int(ids[page[pos]])
                for kind in kinds:
                    t += int(rng.integers(5, 120))
                    seq.append(Action(item_id, kind, t, ctx))
                labels[item_id] = tuple(kinds)
            last_t = t
            pages.append(Page(sid, cid, t0, ctx, g, tuple(int(i) for i in ids[page]), labels))
            s_intent.append(offset)
            s_cust.append(c)
            s_time.append(t0)
            s_cat.append(k + 1)
        actions[cid] = seq
    truth = GroundTruth(u, v, ids, np.array(s_intent).reshape(-1, D), np.array(s_cust, np.int64),
                        np.array(s_time, np.int64), np.array(s_cat, np.int64), brand_aff, pop_w, centroids, brand)
    query_category = {int(q) + 1: int(query_cat[q]) + 1 for q in range(n_queries)}
    return Corpus(cfg, items, actions, gctx, pages, query_category, truth)


def write_corpus(corpus: Corpus, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in
             ("catalog.jsonl", "events.jsonl", "pages.jsonl", "world.json", "ground_truth.npz")}
    write_catalog(paths["catalog.jsonl"], corpus.items)

    def events():
        for cid in sorted(corpus.actions):
            g = corpus.global_ctx[cid]
            for a in corpus.actions[cid]:
                yield action_to_record(cid, a, g)

    write_jsonl(paths["events.jsonl"], events())
    write_jsonl(paths["pages.jsonl"], (p.to_record() for p in corpus.pages))
    cfg = asdict(corpus.cfg)
    world = {"config": cfg, "split_time": corpus.cfg.split_time, "start_time": corpus.cfg.start_time,
             "end_time": corpus.cfg.end_time, "query_category": {str(k): v for k, v in corpus.query_category.items()},
             "num_countries": corpus.cfg.num_countries, "num_devices": corpus.cfg.num_devices,
             "num_queries": len(corpus.query_category)}
    paths["world.json"].write_text(json.dumps(world, sort_keys=True, indent=1))
    corpus.truth.save(paths["ground_truth.npz"])
    return paths


def read_pages(path) -> list[Page]:
    return [Page.from_record(r) for r in read_jsonl(path)]


def read_world(path) -> dict:
    world = json.loads(Path(path).read_text())
    world["query_category"] = {int(k): int(v) for k, v in world["query_category"].items()}
    return world


# ---------------------------------------------------------------------------
# corpus statistics


@dataclass
class CorpusStats:
    num_events: int
    num_customers: int
    type_counts: dict[str, int]
    length_histogram: dict[int, int]
    mean_length: float
    item_counts: list[int]              # per item, descending
    power_law_slope: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def power_law_slope(counts: Iterable[int], min_rank: int = 1, max_rank: int | None = None) -> float | None:
    """Least-squares slope of log(count) against log(rank) for descending counts (negated: returns the exponent)."""
    c = np.sort(np.asarray([x for x in counts if x > 0], dtype=np.float64))[::-1]
    if max_rank is not None:
        c = c[:max_rank]
    c = c[min_rank - 1:]
    if len(c) < 3:
        return None
    r = np.arange(min_rank, min_rank + len(c), dtype=np.float64)
    slope = np.polyfit(np.log(r), np.log(c), 1)[0]
    return float(-slope)


def corpus_stats(events_path, min_rank: int = 1, max_rank: int | None = None) -> CorpusStats:
    """Recount an event file; malformed lines raise ValueError naming the line."""
    types: Counter = Counter()
    per_customer: Counter = Counter()
    per_item: Counter = Counter()
    n = 0
    for rec in read_jsonl(events_path):
        try:
            cid, iid, kind = int(rec["customer_id"]), int(rec["item_id"]), str(rec["action_type"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{events_path}: event {n + 1} is missing fields ({exc})") from None
        types[kind] += 1
        per_customer[cid] += 1
        per_item[iid] += 1
        n += 1
    hist = Counter(per_customer.values())
    counts = sorted(per_item.values(), reverse=True)
    return CorpusStats(
        num_events=n, num_customers=len(per_customer),
        type_counts={t: types.get(t, 0) for t in ACTION_TYPES},
        length_histogram=dict(sorted(hist.items())),
        mean_length=n / len(per_customer) if per_customer else 0.0,
        item_counts=counts,
        power_law_slope=power_law_slope(counts, min_rank, max_rank))
