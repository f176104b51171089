"""Online serving: configuration, per-customer sequence cache, rank handler, version swap, HTTP.

Config is TOML::

    page_size = 84
    retrieval_depth = 500
    serving_position = 0

    [head_weights]
    click = 1.0
    add_to_wishlist = 2.0
    add_to_cart = 3.0
    purchase = 4.0

    [policy]
    epsilon = 0.1
    k = 7
    max_brand_run = 3
    purchase_window_days = 60
    freshness_window_days = 14

    [index]
    mode = "exact"          # or "approximate"
    m = 16
    ef_construction = 200
    ef_search = 64

    [paths]
    catalog = "data/catalog.jsonl"
    world = "data/world.json"
    retrieval_checkpoint = "models/retrieval.rkf"
    ranker_checkpoint = "models/ranker.rkf"
    embeddings = "models/items.rke"
"""

from __future__ import annotations

import bisect
import gc
import json
import logging
import sys
import threading
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Mapping

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .domain import ACTION_INDEX, MAX_SEQUENCE_LENGTH, Action, Catalog, GlobalContext, LocalContext, \
    action_from_record, action_to_record, read_catalog, read_jsonl, write_jsonl
from .index import IndexPair, IndexParams, SwapError, VersionMismatchError, build_index
from .pipeline import ModelBundle, policy_seed, run_pipeline
from .policy import DAY, PolicyConfig
from .ranking import HeadWeights, RankerModel
from .retrieval import EmbeddingSet, TwoTowerModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlatformConfig:
    head_weights: HeadWeights = field(default_factory=HeadWeights)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    index: IndexParams = field(default_factory=IndexParams)
    index_mode: str = "exact"
    page_size: int = 84
    retrieval_depth: int = 500
    serving_position: int = 0
    paths: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.page_size < 1:
            raise ValueError("page_size must be >= 1")
        if self.retrieval_depth < self.page_size:
            raise ValueError("retrieval_depth must be >= page_size")
        if self.index_mode not in ("exact", "approximate"):
            raise ValueError(f"unknown index mode {self.index_mode!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlatformConfig":
        known = {"page_size", "retrieval_depth", "serving_position", "head_weights", "policy", "index", "paths"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        pol = dict(d.get("policy", {}))
        if "purchase_window_days" in pol:
            pol["purchase_window_seconds"] = int(pol.pop("purchase_window_days") * DAY)
        if "freshness_window_days" in pol:
            pol["freshness_window_seconds"] = int(pol.pop("freshness_window_days") * DAY)
        idx = dict(d.get("index", {}))
        mode = idx.pop("mode", "exact")
        return cls(head_weights=HeadWeights(d.get("head_weights")), policy=PolicyConfig(**pol),
                   index=IndexParams(**idx), index_mode=mode,
                   page_size=int(d.get("page_size", 84)), retrieval_depth=int(d.get("retrieval_depth", 500)),
                   serving_position=int(d.get("serving_position", 0)), paths=dict(d.get("paths", {})))

    @classmethod
    def load(cls, path) -> "PlatformConfig":
        with open(path, "rb") as fh:
            cfg = cls.from_dict(tomllib.load(fh))
        base = Path(path).parent
        paths = {k: str((base / v) if not Path(v).is_absolute() else v) for k, v in cfg.paths.items()}
        return cls(cfg.head_weights, cfg.policy, cfg.index, cfg.index_mode, cfg.page_size,
                   cfg.retrieval_depth, cfg.serving_position, paths)


# ---------------------------------------------------------------------------
# sequence cache


class SequenceCache:
    """customer_id -> the most recent ``capacity`` actions, kept in timestamp order."""

    def __init__(self, capacity: int = MAX_SEQUENCE_LENGTH):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._data: dict[int, list[Action]] = {}
        self._locks: defaultdict[int, threading.Lock] = defaultdict(threading.Lock)
        self._meta_lock = threading.Lock()

    def _lock(self, customer_id: int) -> threading.Lock:
        with self._meta_lock:
            return self._locks[customer_id]

    def ingest(self, customer_id: int, action: Action) -> None:
        if not isinstance(action, Action):
            raise TypeError("expected an Action")
        if action.timestamp < 0:
            raise ValueError("timestamp must be >= 0")
        with self._lock(customer_id):
            buf = list(self._data.get(customer_id, ()))
            keys = [a.timestamp for a in buf]
            buf.insert(bisect.bisect_right(keys, action.timestamp), action)
            if len(buf) > self.capacity:
                buf = buf[-self.capacity:]
            self._data[customer_id] = buf       # readers see either the old or the new list

    def get(self, customer_id: int) -> tuple[Action, ...]:
        return tuple(self._data.get(customer_id, ()))

    def __len__(self) -> int:
        return len(self._data)

    def save(self, path) -> None:
        write_jsonl(path, (action_to_record(cid, a) for cid in sorted(self._data) for a in self._data[cid]))

    @classmethod
    def load(cls, path, capacity: int = MAX_SEQUENCE_LENGTH) -> "SequenceCache":
        cache = cls(capacity)
        for rec in read_jsonl(path):
            cache.ingest(int(rec["customer_id"]), action_from_record(rec))
        return cache


def parse_action(rec: Mapping) -> tuple[int, Action]:
    """Validate an event record; raises ValueError with the reason."""
    for key in ("customer_id", "item_id", "action_type", "timestamp"):
        if key not in rec:
            raise ValueError(f"missing field {key!r}")
    if rec["action_type"] not in ACTION_INDEX:
        raise ValueError(f"unknown action_type {rec['action_type']!r}")
    try:
        cid = int(rec["customer_id"])
        action = action_from_record(rec)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"malformed event: {exc}") from None
    if action.timestamp < 0:
        raise ValueError("timestamp must be >= 0")
    return cid, action


# ---------------------------------------------------------------------------
# request handling


@dataclass
class RankRequest:
    customer_id: int
    premise: str = "browse"                 # browse | search
    category_id: int | None = None
    query_id: int | None = None
    global_ctx: GlobalContext = field(default_factory=GlobalContext)
    page: int = 0
    page_size: int | None = None
    timestamp: int | None = None

    @classmethod
    def from_record(cls, rec: Mapping) -> "RankRequest":
        if "customer_id" not in rec:
            raise ValueError("missing field 'customer_id'")
        premise = rec.get("premise", "browse")
        if premise not in ("browse", "search"):
            raise ValueError(f"premise must be browse or search, got {premise!r}")
        opt = lambda k: None if rec.get(k) is None else int(rec[k])
        return cls(int(rec["customer_id"]), premise, opt("category_id"), opt("query_id"),
                   GlobalContext(int(rec.get("country_id", 0)), int(rec.get("device_type_id", 0))),
                   int(rec.get("page", 0)), opt("page_size"), opt("timestamp"))


@dataclass
class RankResponse:
    item_ids: list[int]
    scores: list[float]
    model_version: str | None
    served_at: int
    status: str = "ok"
    message: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


class Platform:
    """Serving state: catalog, active model bundle (blue-green), sequence cache, config."""

    def __init__(self, config: PlatformConfig, catalog: Catalog, bundle: ModelBundle | None = None,
                 cache: SequenceCache | None = None, query_category: Mapping[int, int] | None = None):
        self.config = config
        self.catalog = catalog
        self.cache = cache or SequenceCache()
        self.query_category = dict(query_category or {})
        self._pair: IndexPair | None = IndexPair(bundle) if bundle is not None else None
        self._deploy_lock = threading.Lock()

    @property
    def bundle(self) -> ModelBundle | None:
        return None if self._pair is None else self._pair.active

    @property
    def model_version(self) -> str | None:
        b = self.bundle
        return None if b is None else b.version

    def ingest_event(self, customer_id: int, action: Action) -> None:
        self.cache.ingest(customer_id, action)

    def _scope(self, req: RankRequest) -> tuple[LocalContext, int | None]:
        if req.premise == "search":
            cat = self.query_category.get(req.query_id) if req.query_id is not None else None
            return LocalContext(None, True, req.query_id), cat
        return LocalContext(req.category_id, False, None), req.category_id

    def handle_rank(self, req: RankRequest) -> RankResponse:
        now = int(time.time()) if req.timestamp is None else int(req.timestamp)
        bundle = self.bundle                  # one reference for the whole request
        if bundle is None:
            return RankResponse([], [], None, now, "unavailable", "no model version deployed")
        if bundle.index.model_version != bundle.retrieval.version:
            return RankResponse([], [], bundle.version, now, "unavailable", "index/model version mismatch")
        size = self.config.page_size if req.page_size is None else req.page_size
        if size < 1 or req.page < 0:
            return RankResponse([], [], bundle.version, now, "bad_request", "page and page_size must be valid")
        local, scope = self._scope(req)
        if scope is not None and not bundle.index.has_category(scope):
            return RankResponse([], [], bundle.version, now, "unknown_category", f"no items in category {scope}")
        history = self.cache.get(req.customer_id)
        rng = np.random.default_rng(policy_seed(req.customer_id, now))
        depth = max(self.config.retrieval_depth, (req.page + 1) * size)
        res = run_pipeline(bundle, self.catalog, history, req.global_ctx, local, scope, depth,
                           self.config.head_weights, self.config.policy, now, rng,
                           fixed_position=self.config.serving_position)
        page = res.page[req.page * size:(req.page + 1) * size]
        return RankResponse([s.item_id for s in page], [s.blended_score for s in page], res.model_version, now)

    # -- deployment ------------------------------------------------------------

    def build_bundle(self, retrieval: TwoTowerModel | str | Path, embeddings: EmbeddingSet | str | Path,
                     ranker: RankerModel | str | Path | None) -> ModelBundle:
        if not isinstance(retrieval, TwoTowerModel):
            retrieval = TwoTowerModel.load(retrieval, self.catalog)
        if not isinstance(embeddings, EmbeddingSet):
            embeddings = EmbeddingSet.load(embeddings)
        if embeddings.model_version != retrieval.version:
            raise VersionMismatchError(f"embedding version {embeddings.model_version!r} != "
                                       f"retrieval version {retrieval.version!r}")
        if ranker is not None and not isinstance(ranker, RankerModel):
            ranker = RankerModel.load(ranker)
        index = build_index(embeddings, self.config.index_mode, self.catalog, self.config.index)
        return ModelBundle(retrieval, index, ranker)

    def deploy_version(self, retrieval, embeddings, ranker=None) -> dict:
        """Build the new bundle completely, then swap it in; any failure leaves the old one active."""
        with self._deploy_lock:
            old = self.model_version
            bundle = self.build_bundle(retrieval, embeddings, ranker)
            if old is not None and bundle.version == old:
                raise SwapError(f"version {old!r} is already active")
            if self._pair is None:
                self._pair = IndexPair(bundle)
            else:
                self._pair.stage(bundle)
                self._pair.swap()
            # models and catalog live for the whole process; moving them out of the collector's
            # generations keeps full collections triggered by request garbage short
            gc.collect()
            gc.freeze()
            logger.info("deployed %s (previous %s)", bundle.version, old)
            return {"previous_version": old, "active_version": bundle.version, "swapped_at": int(time.time())}

    @classmethod
    def from_config(cls, config: PlatformConfig) -> "Platform":
        p = config.paths
        catalog = read_catalog(p["catalog"])
        query_category = {}
        if "world" in p:
            world = json.loads(Path(p["world"]).read_text())
            query_category = {int(k): int(v) for k, v in world.get("query_category", {}).items()}
        platform = cls(config, catalog, query_category=query_category)
        if "retrieval_checkpoint" in p and "embeddings" in p:
            platform.deploy_version(p["retrieval_checkpoint"], p["embeddings"], p.get("ranker_checkpoint"))
        return platform


# ---------------------------------------------------------------------------
# HTTP


def make_handler(platform: Platform):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            logger.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, status: int, body: dict) -> None:
            raw = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def _body(self) -> dict:
            n = int(self.headers.get("Content-Length", 0))
            data = json.loads(self.rfile.read(n) or b"{}")
            if not isinstance(data, dict):
                raise ValueError("request body must be a JSON object")
            return data

        def do_GET(self):
            if self.path == "/health":
                self._send(HTTPStatus.OK, {"status": "ok", "customers_cached": len(platform.cache)})
            elif self.path == "/v1/version":
                self._send(HTTPStatus.OK, {"model_version": platform.model_version})
            else:
                self._send(HTTPStatus.NOT_FOUND, {"error": f"no route {self.path}"})

        def do_POST(self):
            try:
                body = self._body()
                if self.path == "/v1/rank":
                    resp = platform.handle_rank(RankRequest.from_record(body))
                    code = {"ok": HTTPStatus.OK, "unavailable": HTTPStatus.SERVICE_UNAVAILABLE,
                            "bad_request": HTTPStatus.BAD_REQUEST}.get(resp.status, HTTPStatus.OK)
                    self._send(code, resp.to_dict())
                elif self.path == "/v1/events":
                    cid, action = parse_action(body)
                    platform.ingest_event(cid, action)
                    self._send(HTTPStatus.ACCEPTED, {"status": "accepted"})
                else:
                    self._send(HTTPStatus.NOT_FOUND, {"error": f"no route {self.path}"})
            except (ValueError, TypeError) as exc:
                self._send(HTTPStatus.BAD_REQUEST, {"status": "rejected", "error": str(exc)})

    return Handler


def serve(platform: Platform, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    """Create (not start) a threaded HTTP server; call ``serve_forever`` on the result."""
    return ThreadingHTTPServer((host, port), make_handler(platform))
