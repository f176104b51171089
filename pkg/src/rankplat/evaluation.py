"""Offline evaluation: temporal split, re-rank protocol, ranking metrics and significance."""

from __future__ import annotations

import json
import logging
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np
from scipy import stats

from .domain import Action, Catalog, GlobalContext, LocalContext, RankedList
from .index import VersionMismatchError
from .pipeline import ModelBundle, policy_seed, run_pipeline
from .policy import PolicyConfig
from .ranking import HEADS, HeadWeights, RankingExample

logger = logging.getLogger(__name__)

DEFAULT_KS = (6, 84, 500)
HVA_COLUMNS = [HEADS.index("add_to_wishlist"), HEADS.index("add_to_cart")]


# ---------------------------------------------------------------------------
# metrics


def recall_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    """|top-k ∩ relevant| / |relevant|; 0.0 for an empty relevant set (callers exclude those)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = set(relevant)
    if not rel:
        return 0.0
    return len(set(list(ranked)[:k]) & rel) / len(rel)


def ndcg_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int) -> float:
    """Binary-gain NDCG; 0.0 when there is nothing relevant."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = set(relevant)
    if not rel:
        return 0.0
    dcg = sum(1.0 / math.log2(p + 2) for p, i in enumerate(list(ranked)[:k]) if i in rel)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(k, len(rel))))
    return dcg / idcg


def diversity_max_run(brands: Sequence) -> int:
    """Length of the longest run of equal consecutive brands."""
    best = run = 0
    prev = object()
    for b in brands:
        run = run + 1 if b == prev else 1
        prev = b
        best = max(best, run)
    return best


def novelty_recall(ranked: Sequence[int], relevant: Iterable[int], is_new: Callable[[int], bool], k: int) -> float | None:
    """Recall restricted to relevant new items; None when no relevant item is new."""
    fresh = {i for i in relevant if is_new(i)}
    if not fresh:
        return None
    return recall_at_k(ranked, fresh, k)


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test on a - b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("paired samples must be 1-d, equal length, n >= 2")
    d = a - b
    n = len(d)
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return float(t), float(2.0 * stats.t.sf(abs(t), n - 1))


# ---------------------------------------------------------------------------
# requests and splits


@dataclass
class EvalRequest:
    customer_id: int
    timestamp: int
    history: tuple[Action, ...]
    global_ctx: GlobalContext
    local_ctx: LocalContext
    page_item_ids: np.ndarray
    labels: np.ndarray                    # [N, 4] in HEADS order
    page_id: int = -1

    def relevant(self, hva: bool = False) -> set[int]:
        cols = self.labels[:, HVA_COLUMNS] if hva else self.labels
        return {int(i) for i in self.page_item_ids[cols.any(axis=1)]}

    def visible_history(self) -> tuple[Action, ...]:
        """Actions strictly before the request; nothing later may reach a model."""
        return tuple(a for a in self.history if a.timestamp < self.timestamp)


def temporal_split(actions: Mapping[int, Sequence[Action]], split_time: int):
    """(train, test) per customer: train actions have timestamp < split_time, test the rest."""
    train, test = {}, {}
    for cid, acts in actions.items():
        tr = [a for a in acts if a.timestamp < split_time]
        te = [a for a in acts if a.timestamp >= split_time]
        if tr:
            train[cid] = tr
        if te:
            test[cid] = te
    if not train:
        warnings.warn("temporal split produced an empty training side", stacklevel=2)
    if not test:
        warnings.warn("temporal split produced an empty test side", stacklevel=2)
    return train, test


def requests_from_pages(pages, actions: Mapping[int, Sequence[Action]], start: int | None = None,
                        end: int | None = None) -> list[EvalRequest]:
    """One request per logged page with start <= timestamp < end; history is everything earlier."""
    out = []
    for p in pages:
        if (start is not None and p.timestamp < start) or (end is not None and p.timestamp >= end):
            continue
        ids = np.asarray(p.item_ids, dtype=np.int64)
        labels = np.zeros((len(ids), len(HEADS)))
        pos = {int(i): n for n, i in enumerate(ids)}
        for item, kinds in p.labels.items():
            if item in pos:
                for k in kinds:
                    labels[pos[item], HEADS.index(k)] = 1.0
        hist = tuple(a for a in actions.get(p.customer_id, ()) if a.timestamp < p.timestamp)
        out.append(EvalRequest(p.customer_id, p.timestamp, hist, p.global_ctx, p.context, ids, labels, p.page_id))
    return out


def ranking_examples(requests: Sequence[EvalRequest]) -> list[RankingExample]:
    """Logged pages as ranker training examples; positions are the displayed order."""
    return [RankingExample(r.visible_history(), r.page_item_ids, r.labels, np.arange(len(r.page_item_ids)),
                           r.global_ctx, r.local_ctx, r.customer_id, r.timestamp) for r in requests]


# ---------------------------------------------------------------------------
# systems


class RankingSystem(Protocol):
    name: str

    def rank(self, req: EvalRequest, history: tuple[Action, ...], scope: int | None, depth: int) -> list[int]:
        ...


@dataclass
class PopularitySystem:
    """Items ordered by interaction count inside a trailing window before ``as_of``."""

    catalog: Catalog
    train_actions: Mapping[int, Sequence[Action]]
    as_of: int
    window_seconds: int | None = 28 * 86400
    name: str = "popularity"

    def __post_init__(self):
        lo = -math.inf if self.window_seconds is None else self.as_of - self.window_seconds
        counts = Counter(a.item_id for acts in self.train_actions.values() for a in acts
                         if lo <= a.timestamp < self.as_of)
        c = np.array([counts.get(int(i), 0) for i in self.catalog.ids], dtype=np.float64)
        order = np.lexsort((self.catalog.popularity_rank, -c))
        self.order = self.catalog.ids[order]
        self._cat = self.catalog.category[order]

    def rank(self, req, history, scope, depth):
        ids = self.order if scope is None else self.order[self._cat == scope]
        return ids[:depth].tolist()


@dataclass
class PipelineSystem:
    """Retrieval (+ ranker) (+ policy) through the shared serving pipeline."""

    bundle: ModelBundle
    catalog: Catalog
    use_ranker: bool = True
    policy: PolicyConfig | None = None
    weights: HeadWeights = field(default_factory=HeadWeights)
    name: str = "full"

    def rank(self, req, history, scope, depth):
        rng = np.random.default_rng(policy_seed(req.customer_id, req.timestamp))
        res = run_pipeline(self.bundle, self.catalog, history, req.global_ctx, req.local_ctx, scope, depth,
                           self.weights, self.policy, req.timestamp, rng, use_ranker=self.use_ranker)
        return res.page.item_ids


@dataclass
class ScoreSystem:
    """Any item scorer ``fn(request, history) -> scores over catalog rows``."""

    catalog: Catalog
    fn: Callable[[EvalRequest, tuple], np.ndarray]
    name: str = "scores"

    def rank(self, req, history, scope, depth):
        s = np.asarray(self.fn(req, history), dtype=np.float64)
        ids = self.catalog.ids
        if scope is not None:
            keep = self.catalog.category == scope
            s, ids = s[keep], ids[keep]
        order = np.lexsort((ids, -s))[:depth]
        return ids[order].tolist()


# ---------------------------------------------------------------------------
# protocol


@dataclass
class MetricReport:
    system: str
    ks: tuple[int, ...]
    recall: dict[int, list[float]] = field(default_factory=dict)
    ndcg: dict[int, list[float]] = field(default_factory=dict)
    hva_ndcg: dict[int, list[float]] = field(default_factory=dict)
    novelty: dict[int, list[float]] = field(default_factory=dict)
    diversity: list[int] = field(default_factory=list)
    request_ids: list[int] = field(default_factory=list)
    num_requests: int = 0

    def mean(self, metric: str, k: int | None = None) -> float:
        vals = getattr(self, metric) if k is None else getattr(self, metric)[k]
        return float(np.mean(vals)) if len(vals) else float("nan")

    def summary(self) -> dict:
        out = {"system": self.system, "requests": self.num_requests,
               "evaluated": len(self.request_ids), "max_brand_run": self.mean("diversity")}
        for k in self.ks:
            out[f"recall@{k}"] = self.mean("recall", k)
            out[f"ndcg@{k}"] = self.mean("ndcg", k)
            out[f"hva_ndcg@{k}"] = self.mean("hva_ndcg", k)
            out[f"novelty@{k}"] = self.mean("novelty", k)
            out[f"hva_count@{k}"] = len(self.hva_ndcg[k])
            out[f"novelty_count@{k}"] = len(self.novelty[k])
        return out


def request_scope(req: EvalRequest, query_category: Mapping[int, int] | None) -> int | None:
    ctx = req.local_ctx
    if ctx.browse_category_id is not None:
        return int(ctx.browse_category_id)
    if ctx.search_query_id is not None and query_category:
        return query_category.get(int(ctx.search_query_id))
    return None


def run_protocol(systems: Sequence[RankingSystem], requests: Sequence[EvalRequest], catalog: Catalog,
                 depth: int = 500, ks: Sequence[int] = DEFAULT_KS, scoped: bool = True,
                 query_category: Mapping[int, int] | None = None,
                 freshness_seconds: int = 14 * 86400, page_size: int = 84) -> dict[str, MetricReport]:
    """Evaluate each system on every request; requests with no relevant item are excluded."""
    for s in systems:
        bundle = getattr(s, "bundle", None)
        if bundle is not None and bundle.index.model_version != bundle.retrieval.version:
            raise VersionMismatchError(f"{s.name}: index/model version mismatch")
    ks = tuple(sorted(set(int(k) for k in ks)))
    reports = {s.name: MetricReport(s.name, ks, {k: [] for k in ks}, {k: [] for k in ks},
                                    {k: [] for k in ks}, {k: [] for k in ks}) for s in systems}
    brand_rows = dict(zip(catalog.ids.tolist(), catalog.brand.tolist()))
    act_rows = dict(zip(catalog.ids.tolist(), catalog.activation_time.tolist()))
    for req in requests:
        rel = req.relevant()
        hva = req.relevant(hva=True)
        scope = request_scope(req, query_category) if scoped else None
        history = req.visible_history()
        for s in systems:
            rep = reports[s.name]
            rep.num_requests += 1
            if not rel:
                continue
            ranked = s.rank(req, history, scope, max(depth, max(ks)))
            rep.request_ids.append(req.page_id)
            for k in ks:
                rep.recall[k].append(recall_at_k(ranked, rel, k))
                rep.ndcg[k].append(ndcg_at_k(ranked, rel, k))
                if hva:
                    rep.hva_ndcg[k].append(ndcg_at_k(ranked, hva, k))
                nv = novelty_recall(ranked, rel, lambda i: 0 <= req.timestamp - act_rows.get(i, -10**12)
                                    <= freshness_seconds, k)
                if nv is not None:
                    rep.novelty[k].append(nv)
            rep.diversity.append(diversity_max_run([brand_rows.get(i) for i in ranked[:page_size]]))
    return reports


def leakage_audit(system: RankingSystem, req: EvalRequest, future: Action, depth: int = 500,
                  scope: int | None = None) -> bool:
    """True when injecting an action after the request time leaves the ranking unchanged."""
    if future.timestamp < req.timestamp:
        raise ValueError("the injected action must not precede the request")
    base = system.rank(req, req.visible_history(), scope, depth)
    poisoned = EvalRequest(req.customer_id, req.timestamp, req.history + (future,), req.global_ctx,
                           req.local_ctx, req.page_item_ids, req.labels, req.page_id)
    return system.rank(poisoned, poisoned.visible_history(), scope, depth) == base


def write_report(path, reports: Mapping[str, MetricReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rep in reports.values():
            fh.write(json.dumps(rep.summary(), sort_keys=True) + "\n")


def format_table(reports: Mapping[str, MetricReport], ks: Sequence[int] | None = None) -> str:
    reps = list(reports.values())
    if not reps:
        return ""
    ks = tuple(ks or reps[0].ks)
    cols = [f"{m}@{k}" for k in ks for m in ("recall", "ndcg", "hva_ndcg")] + ["max_brand_run"]
    width = max(12, max(len(c) for c in cols) + 1)
    lines = ["system".ljust(14) + "".join(c.rjust(width) for c in cols)]
    for rep in reps:
        s = rep.summary()
        lines.append(rep.system.ljust(14) + "".join(f"{s[c]:.4f}".rjust(width) for c in cols))
    return "\n".join(lines)


def compare(reports: Mapping[str, MetricReport], a: str, b: str, metric: str = "ndcg", k: int = 6) -> dict:
    """Paired t-test of system ``a`` against ``b`` on a per-request metric."""
    ra, rb = reports[a], reports[b]
    if ra.request_ids != rb.request_ids:
        raise ValueError("reports cover different requests")
    xa = getattr(ra, metric)[k]
    xb = getattr(rb, metric)[k]
    t, p = paired_t_test(xa, xb)
    return {"a": a, "b": b, "metric": f"{metric}@{k}", "mean_a": float(np.mean(xa)), "mean_b": float(np.mean(xb)),
            "t": t, "p": p}
