"""Versioned item-embedding index with exact and graph-based top-k search.

Index versions are immutable snapshots: ``upsert_item`` returns a new version
object and ``IndexPair`` swaps whole references, so a reader holding a version
never sees a half-applied write.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .domain import Catalog, ScoredItem
from .hnsw import HNSWGraph
from .retrieval import EmbeddingSet

MODES = ("exact", "approximate")


class VersionMismatchError(ValueError):
    pass


class SwapError(RuntimeError):
    pass


@dataclass(frozen=True)
class IndexParams:
    m: int = 16
    ef_construction: int = 200
    ef_search: int = 64
    seed: int = 0


@dataclass(frozen=True)
class EmbeddingIndexVersion:
    model_version: str
    item_ids: np.ndarray          # int64 [count]
    vectors: np.ndarray           # float32 [count, d_emb]
    categories: np.ndarray        # int64 [count]; -1 when unknown
    mode: str = "exact"
    params: IndexParams = field(default_factory=IndexParams)
    graph: HNSWGraph | None = None
    _rows: dict = field(default_factory=dict, repr=False, compare=False)
    _by_category: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self._rows:
            self._rows.update((int(i), r) for r, i in enumerate(self.item_ids))
        if not self._by_category:
            order = np.argsort(self.categories, kind="stable")
            cats, starts = np.unique(self.categories[order], return_index=True)
            for c, rows in zip(cats, np.split(order, starts[1:])):
                self._by_category[int(c)] = rows

    @property
    def d_emb(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.item_ids)

    def __contains__(self, item_id: int) -> bool:
        return int(item_id) in self._rows

    def has_category(self, category: int) -> bool:
        return int(category) in self._by_category

    def vector(self, item_id: int) -> np.ndarray:
        return self.vectors[self._rows[int(item_id)]]

    # -- search ------------------------------------------------------------

    def _check_query(self, q, k: int) -> np.ndarray:
        q = np.asarray(q, dtype=np.float32).reshape(-1)
        if q.shape[0] != self.d_emb:
            raise ValueError(f"query has length {q.shape[0]}, index expects {self.d_emb}")
        if k < 1:
            raise ValueError("k must be >= 1")
        return q

    def _exact(self, q: np.ndarray, k: int, rows: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
        if rows is None:
            scores = self.vectors @ q
            rows = np.arange(len(self))
        else:
            scores = self.vectors[rows] @ q
        if k < len(rows):
            # keep every candidate tied with the k-th score so id tie-breaks stay exact
            kth = np.partition(scores, len(scores) - k)[len(scores) - k]
            keep = scores >= kth
            rows, scores = rows[keep], scores[keep]
        order = np.lexsort((self.item_ids[rows], -scores))[:k]
        return rows[order], scores[order]

    def _approximate(self, q: np.ndarray, k: int, category: int | None) -> tuple[np.ndarray, np.ndarray]:
        ef = max(self.params.ef_search, k)
        while True:
            rows, scores = self.graph.search(self.vectors, q, k, ef)
            if category is not None:
                keep = self.categories[rows] == category
                rows, scores = rows[keep], scores[keep]
            if len(rows) >= k or ef >= len(self):
                break
            ef *= 2
        if category is not None and len(rows) < min(k, len(self._by_category[category])):
            return self._exact(q, k, self._by_category[category])
        order = np.lexsort((self.item_ids[rows], -scores))[:k]
        return rows[order], scores[order].astype(np.float32)

    def search(self, q, k: int, category: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(item ids, dot scores), best first."""
        q = self._check_query(q, k)
        if category is not None and int(category) not in self._by_category:
            return np.zeros(0, np.int64), np.zeros(0, np.float32)
        category = None if category is None else int(category)
        if self.mode == "approximate" and self.graph is not None:
            rows, scores = self._approximate(q, k, category)
        else:
            rows, scores = self._exact(q, k, None if category is None else self._by_category[category])
        return self.item_ids[rows], scores

    # -- persistence -------------------------------------------------------

    def save(self, prefix) -> None:
        """Write ``<prefix>.rke`` (+ ``.rkg`` graph) and a ``.json`` with categories and params."""
        prefix = Path(prefix)
        EmbeddingSet(self.model_version, self.item_ids, self.vectors).save(prefix.with_suffix(".rke"))
        if self.graph is not None:
            self.graph.save(prefix.with_suffix(".rkg"), self.model_version)
        meta = {"model_version": self.model_version, "mode": self.mode,
                "params": vars(self.params), "categories": self.categories.tolist()}
        prefix.with_suffix(".json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, prefix) -> "EmbeddingIndexVersion":
        prefix = Path(prefix)
        emb = EmbeddingSet.load(prefix.with_suffix(".rke"))
        meta = json.loads(prefix.with_suffix(".json").read_text())
        if meta["model_version"] != emb.model_version:
            raise VersionMismatchError(f"metadata version {meta['model_version']!r} != embeddings {emb.model_version!r}")
        graph = None
        if prefix.with_suffix(".rkg").exists():
            graph, gv = HNSWGraph.load(prefix.with_suffix(".rkg"))
            if gv != emb.model_version:
                raise VersionMismatchError(f"graph version {gv!r} != embeddings {emb.model_version!r}")
        return cls(emb.model_version, emb.item_ids, emb.vectors,
                   np.asarray(meta["categories"], dtype=np.int64), meta["mode"],
                   IndexParams(**meta["params"]), graph)


def _category_column(item_ids: np.ndarray, categories) -> np.ndarray:
    if categories is None:
        return np.full(len(item_ids), -1, np.int64)
    if isinstance(categories, Catalog):
        rows = categories.rows(item_ids)
        return np.where(rows >= 0, categories.category[np.maximum(rows, 0)], -1)
    return np.array([int(categories.get(int(i), -1)) for i in item_ids], dtype=np.int64)


def build_index(embeddings: EmbeddingSet | Mapping[int, np.ndarray], mode: str = "exact",
                categories: Catalog | Mapping[int, int] | None = None,
                params: IndexParams | None = None, model_version: str | None = None) -> EmbeddingIndexVersion:
    """Index an embedding set; ``categories`` maps item_id -> category_id."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    params = params or IndexParams()
    if isinstance(embeddings, EmbeddingSet):
        version = embeddings.model_version if model_version is None else model_version
        if version != embeddings.model_version:
            raise VersionMismatchError(f"requested {version!r}, embeddings are {embeddings.model_version!r}")
        ids = np.asarray(embeddings.item_ids, dtype=np.int64)
        vecs = np.asarray(embeddings.vectors, dtype=np.float32)
    else:
        if model_version is None:
            raise ValueError("model_version is required for raw embedding mappings")
        version = model_version
        ids = np.array(list(embeddings.keys()), dtype=np.int64)
        rows = [np.asarray(v, dtype=np.float32).reshape(-1) for v in embeddings.values()]
        if len({len(r) for r in rows}) > 1:
            raise ValueError("embedding rows have mismatched dimensions")
        vecs = np.stack(rows) if rows else np.zeros((0, 0), np.float32)
    if len(ids) == 0:
        raise ValueError("cannot index an empty embedding set")
    if vecs.ndim != 2 or vecs.shape[0] != len(ids):
        raise ValueError("embedding rows have mismatched dimensions")
    if len(np.unique(ids)) != len(ids):
        raise ValueError("duplicate item ids in embedding set")
    vecs = np.ascontiguousarray(vecs)
    graph = None
    if mode == "approximate":
        graph = HNSWGraph(params.m, params.ef_construction, params.seed)
        graph.add(vecs, len(ids))
    return EmbeddingIndexVersion(version, ids, vecs, _category_column(ids, categories), mode, params, graph)


def query_topk(index: EmbeddingIndexVersion, customer_vector, k: int,
               category_filter: int | None = None) -> list[ScoredItem]:
    ids, scores = index.search(customer_vector, k, category_filter)
    return [ScoredItem(int(i), {}, float(s)) for i, s in zip(ids, scores)]


def upsert_item(index: EmbeddingIndexVersion, item_id: int, embedding, model_version: str,
                category: int | None = None) -> EmbeddingIndexVersion:
    """Copy-on-write insert or replace; the input version object is left untouched."""
    if model_version != index.model_version:
        raise VersionMismatchError(f"embedding version {model_version!r} != index version {index.model_version!r}")
    v = np.asarray(embedding, dtype=np.float32).reshape(-1)
    if v.shape[0] != index.d_emb:
        raise ValueError(f"embedding has length {v.shape[0]}, index expects {index.d_emb}")
    item_id = int(item_id)
    graph = index.graph.copy() if index.graph is not None else None
    if item_id in index:
        row = index._rows[item_id]
        vecs = index.vectors.copy()
        vecs[row] = v
        cats = index.categories.copy()
        if category is not None:
            cats[row] = category
        ids = index.item_ids
        if graph is not None:
            graph.relink(vecs, row)
    else:
        ids = np.append(index.item_ids, item_id)
        vecs = np.vstack([index.vectors, v[None, :]])
        cats = np.append(index.categories, -1 if category is None else int(category))
        if graph is not None:
            graph.add(vecs, 1)
    return replace(index, item_ids=ids, vectors=vecs, categories=cats, graph=graph, _rows={}, _by_category={})


class IndexPair:
    """Active/staging index slots; readers take ``active`` once per query."""

    def __init__(self, active: EmbeddingIndexVersion):
        self._active = active
        self._staging: EmbeddingIndexVersion | None = None
        self._lock = threading.Lock()

    @property
    def active(self) -> EmbeddingIndexVersion:
        return self._active

    @property
    def staging(self) -> EmbeddingIndexVersion | None:
        return self._staging

    def stage(self, new: EmbeddingIndexVersion) -> None:
        with self._lock:
            if new.model_version == self._active.model_version:
                raise SwapError(f"staging version {new.model_version!r} equals the active version")
            self._staging = new

    def swap(self) -> EmbeddingIndexVersion:
        """Promote staging to active; returns the retired version."""
        with self._lock:
            if self._staging is None:
                raise SwapError("no staged index to swap in")
            old, self._active, self._staging = self._active, self._staging, None
            return old

    def upsert(self, item_id: int, embedding, model_version: str, category: int | None = None) -> None:
        """Route an upsert to whichever slot carries ``model_version``."""
        with self._lock:
            if self._staging is not None and self._staging.model_version == model_version:
                self._staging = upsert_item(self._staging, item_id, embedding, model_version, category)
            elif self._active.model_version == model_version:
                self._active = upsert_item(self._active, item_id, embedding, model_version, category)
            else:
                raise VersionMismatchError(f"no index slot holds version {model_version!r}")

    def search(self, q, k: int, category: int | None = None) -> tuple[str, np.ndarray, np.ndarray]:
        idx = self._active
        ids, scores = idx.search(q, k, category)
        return idx.model_version, ids, scores


def stage_and_swap(pair: IndexPair, new: EmbeddingIndexVersion) -> IndexPair:
    pair.stage(new)
    pair.swap()
    return pair
