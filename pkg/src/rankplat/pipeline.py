"""Retrieve -> rank -> compose, shared by the offline harness and the server."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .domain import Action, Catalog, GlobalContext, LocalContext, RankedList, ScoredItem
from .index import EmbeddingIndexVersion, VersionMismatchError
from .policy import (DAY, CandidatePools, PolicyConfig, compose_page, content_relevance, new_item_ids)
from .ranking import HEADS, HeadWeights, RankerModel, blend, score_matrix
from .retrieval import TwoTowerModel, embed_customer


@dataclass(frozen=True)
class ModelBundle:
    """Everything one model version serves with; swapped as a unit."""

    retrieval: TwoTowerModel
    index: EmbeddingIndexVersion
    ranker: RankerModel | None = None

    def __post_init__(self):
        if self.index.model_version != self.retrieval.version:
            raise VersionMismatchError(f"index version {self.index.model_version!r} != "
                                       f"retrieval version {self.retrieval.version!r}")

    @property
    def version(self) -> str:
        return self.retrieval.version

    model_version = version


@dataclass
class PipelineResult:
    model_version: str
    retrieved: np.ndarray                        # item ids, retrieval order
    retrieval_scores: np.ndarray
    ranked: list[ScoredItem] = field(default_factory=list)   # ranker order, before policy
    page: RankedList = field(default_factory=RankedList)     # after policy


def policy_seed(customer_id: int, timestamp: int) -> int:
    """Per (customer, day) seed so pages are reproducible within a day."""
    return int(np.random.SeedSequence([int(customer_id) & 0xFFFFFFFF, int(timestamp // DAY)]).generate_state(1)[0])


def run_pipeline(bundle: ModelBundle, catalog: Catalog, history: Sequence[Action], g: GlobalContext | None,
                 l: LocalContext | None, scope: int | None, depth: int, weights: HeadWeights,
                 policy: PolicyConfig | None, now: int, rng: np.random.Generator | None = None,
                 brand_of: Mapping[int, int] | None = None, use_ranker: bool = True,
                 fixed_position: int | None = None) -> PipelineResult:
    """Score the (optionally category-scoped) catalog, re-rank the top ``depth``, compose the page.

    ``policy=None`` skips the policy layer; ``use_ranker=False`` keeps retrieval order.
    """
    u = embed_customer(bundle.retrieval, history, g, l, catalog)
    ids, scores = bundle.index.search(u, depth, scope)
    result = PipelineResult(bundle.version, ids, scores)
    if not len(ids):
        return result
    if use_ranker and bundle.ranker is not None:
        probs = score_matrix(bundle.ranker, history, g, l, ids, catalog, fixed_position=fixed_position)
        blended = blend(probs, weights)
        order = np.argsort(-blended, kind="stable")
        id_list, prob_list, score_list = ids[order].tolist(), probs[order].tolist(), blended[order].tolist()
        ranked = [ScoredItem(i, dict(zip(HEADS, p)), b) for i, p, b in zip(id_list, prob_list, score_list)]
    else:
        # retrieval scores can be negative; relevance for the policy layer must be positive
        rel = np.exp(scores - scores.max())
        ranked = [ScoredItem(i, {}, r) for i, r in zip(ids.tolist(), rel.tolist())]
    result.ranked = ranked
    if policy is None:
        result.page = RankedList(ranked)
        return result
    organic_ids = {s.item_id for s in ranked}
    fresh = [i for i in new_item_ids(catalog, now, policy).tolist() if i not in organic_ids]
    if scope is not None and fresh:
        rows = catalog.rows(fresh)
        fresh = [i for i, r in zip(fresh, rows) if r >= 0 and catalog.category[r] == scope]
    new_pool = []
    if fresh:
        tables = [t.data for t in bundle.ranker.encoder.meta_emb] if bundle.ranker is not None else \
            [t.data for t in bundle.retrieval.item_meta]
        rel = content_relevance(tables, catalog, [a.item_id for a in history], fresh)
        if len(fresh) > depth:
            # same budget as the organic side: the best ``depth`` fresh items by content score
            keep = np.sort(np.argsort(-rel, kind="stable")[:depth])
            fresh, rel = [fresh[i] for i in keep], rel[keep]
        new_pool = [ScoredItem(i, {}, r) for i, r in zip(fresh, rel.tolist())]
    if brand_of is None:
        page_ids = np.array([s.item_id for s in ranked] + [s.item_id for s in new_pool], dtype=np.int64)
        rows = catalog.rows(page_ids)
        brand_of = dict(zip(page_ids.tolist(), np.where(rows >= 0, catalog.brand[np.maximum(rows, 0)], -1).tolist()))
    rng = rng or np.random.default_rng(0)
    result.page = compose_page(CandidatePools(ranked, new_pool), policy, rng, history, now, brand_of)
    return result

