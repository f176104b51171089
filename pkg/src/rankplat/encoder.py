"""Customer-journey tokenization and the causally masked transformer encoder.

Token layout per sequence::

    [global context, local context, summary, action_1, ..., action_n]

Each action token concatenates item id, categorical metadata, projected visual
vector, action type and timestamp-bucket embeddings with the local context of
the step that follows it (the request context for the most recent action),
then projects to ``d_model``. There is no positional encoding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .domain import (
    ACTION_INDEX,
    Action,
    Catalog,
    CustomerSequence,
    GlobalContext,
    LocalContext,
    truncate_sequence,
)
from .nn import Tensor

ROLE_CONTEXT, ROLE_SUMMARY, ROLE_ACTION = "context", "summary", "action"
NUM_TIME_BUCKETS = 32


def timestamp_bucket(timestamp, train_origin: int):
    """floor(log2(1 + seconds since train_origin)), capped at 31; 0 before the origin."""
    delta = np.asarray(timestamp, dtype=np.float64) - float(train_origin)
    bucket = np.floor(np.log2(1.0 + np.maximum(delta, 0.0))).astype(np.int64)
    return np.where(delta < 0, 0, np.minimum(bucket, NUM_TIME_BUCKETS - 1))


@dataclass(frozen=True)
class Vocab:
    """Vocabulary sizes; every table reserves row 0 for unknown codes."""

    brands: int
    categories: int
    colors: int
    materials: int
    patterns: int
    countries: int
    devices: int
    queries: int

    @classmethod
    def from_catalog(cls, catalog: Catalog, countries: int = 1, devices: int = 1, queries: int = 1) -> "Vocab":
        def size(col):
            return int(col.max()) + 1 if len(col) else 1

        a = catalog.attrs
        return cls(size(a["brand_id"]), size(a["category_id"]), size(a["color_id"]),
                   size(a["material_id"]), size(a["pattern_id"]), countries, devices, queries)


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    max_seq_len: int = 100
    activation: str = "gelu"
    num_context_tokens: int = 3
    ffn_mult: int = 4
    fuse_local: str = "concat"
    use_local_context: bool = True
    train_origin: int = 0
    id_dim: int = 32
    meta_dim: int = 8
    visual_dim: int = 32
    action_dim: int = 8
    time_dim: int = 8
    context_dim: int = 8

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if self.max_seq_len < self.num_context_tokens + 1:
            raise ValueError("max_seq_len must leave room for at least one action")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.fuse_local not in ("concat", "average"):
            raise ValueError(f"unknown fuse_local {self.fuse_local!r}")

    @property
    def max_actions(self) -> int:
        return self.max_seq_len - self.num_context_tokens

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderInput:
    """One sequence to encode. ``summary_ids`` feed the summary token."""

    actions: Sequence[Action]
    global_ctx: GlobalContext = field(default_factory=GlobalContext)
    local_ctx: LocalContext = field(default_factory=LocalContext)
    summary_ids: Sequence[int] = ()


@dataclass
class TokenBatch:
    """Index-level token description for a right-padded batch."""

    lengths: np.ndarray          # total tokens per row, context included
    item_rows: np.ndarray        # [B, L] action item id-vocab rows
    item_cat_rows: np.ndarray    # [B, L] catalog rows (-1 unknown)
    action_type: np.ndarray      # [B, L]
    time_bucket: np.ndarray      # [B, L]
    fused_ctx: np.ndarray        # [B, L, 3] (category, is_search, query) codes
    global_codes: np.ndarray     # [B, 2]
    local_codes: np.ndarray      # [B, 3]
    summary_rows: np.ndarray     # flat catalog rows of summary items
    summary_idrows: np.ndarray   # flat id-vocab rows of summary items
    summary_weights: np.ndarray  # [B, n_summary] averaging matrix

    @property
    def batch_size(self) -> int:
        return len(self.lengths)


@dataclass
class TokenSequence:
    matrix: Tensor               # [positions, d_model]
    mask: np.ndarray             # [positions, positions] bool, True = may attend
    roles: list[str]


class IdVocab:
    """Maps opaque item ids to embedding rows; row 0 is reserved for unknown ids."""

    def __init__(self, item_ids):
        self.ids = np.unique(np.asarray(item_ids, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.ids) + 1

    def rows(self, item_ids) -> np.ndarray:
        ids = np.asarray(item_ids, dtype=np.int64)
        if not len(self.ids):
            return np.zeros(ids.shape, dtype=np.int64)
        pos = np.clip(np.searchsorted(self.ids, ids), 0, len(self.ids) - 1)
        return np.where(self.ids[pos] == ids, pos + 1, 0)


def _code(value, size: int) -> int:
    if value is None:
        return 0
    value = int(value)
    return value if 0 <= value < size else 0


class SequenceEncoder:
    """Parameters and forward pass for one model's customer/context encoder."""

    def __init__(self, cfg: EncoderConfig, vocab: Vocab, ids: IdVocab, d_pre: int,
                 store: nn.ParameterStore, rng: np.random.Generator, prefix: str = "enc."):
        self.cfg, self.vocab, self.ids, self.d_pre = cfg, vocab, ids, d_pre
        self.store, self.prefix = store, prefix
        d, tn = cfg.d_model, nn.truncated_normal

        def p(name, shape, zeros=False):
            return store.add(prefix + name, np.zeros(shape) if zeros else tn(rng, shape))

        self.id_emb = p("item_id", (len(ids), cfg.id_dim))
        self.meta_emb = [p(f"meta.{f}", (n, cfg.meta_dim)) for f, n in zip(
            Catalog.FIELDS, (vocab.brands, vocab.categories, vocab.colors, vocab.materials, vocab.patterns))]
        self.vis_w = p("visual.w", (max(d_pre, 1), cfg.visual_dim))
        self.vis_b = p("visual.b", (cfg.visual_dim,), zeros=True)
        self.act_emb = p("action_type", (len(ACTION_INDEX), cfg.action_dim))
        self.time_emb = p("time_bucket", (NUM_TIME_BUCKETS, cfg.time_dim))
        cd = cfg.context_dim
        self.ctx_cat = p("ctx.category", (vocab.categories, cd))
        self.ctx_search = p("ctx.is_search", (2, cd))
        self.ctx_query = p("ctx.query", (vocab.queries, cd))
        self.country = p("global.country", (vocab.countries, cd))
        self.device = p("global.device", (vocab.devices, cd))
        self.global_w = p("global.w", (2 * cd, d))
        self.global_b = p("global.b", (d,), zeros=True)
        self.local_w = p("local.w", (3 * cd, d))
        self.local_b = p("local.b", (d,), zeros=True)
        act_in = self.item_feature_dim + cfg.action_dim + cfg.time_dim
        if cfg.fuse_local == "concat":
            act_in += 3 * cd
        self.action_w = p("action.w", (act_in, d))
        self.action_b = p("action.b", (d,), zeros=True)
        self.item_w = p("item.w", (self.item_feature_dim, d))
        self.item_b = p("item.b", (d,), zeros=True)
        hidden = cfg.ffn_mult * d
        self.layers = []
        for i in range(cfg.num_layers):
            q = f"layer{i}."
            self.layers.append({
                "ln1_g": store.add(prefix + q + "ln1.g", np.ones(d)),
                "ln1_b": p(q + "ln1.b", (d,), zeros=True),
                "wq": p(q + "wq", (d, d)), "bq": p(q + "bq", (d,), zeros=True),
                "wk": p(q + "wk", (d, d)), "bk": p(q + "bk", (d,), zeros=True),
                "wv": p(q + "wv", (d, d)), "bv": p(q + "bv", (d,), zeros=True),
                "wo": p(q + "wo", (d, d)), "bo": p(q + "bo", (d,), zeros=True),
                "ln2_g": store.add(prefix + q + "ln2.g", np.ones(d)),
                "ln2_b": p(q + "ln2.b", (d,), zeros=True),
                "w1": p(q + "w1", (d, hidden)), "b1": p(q + "b1", (hidden,), zeros=True),
                "w2": p(q + "w2", (hidden, d)), "b2": p(q + "b2", (d,), zeros=True),
            })
        self.lnf_g = store.add(prefix + "lnf.g", np.ones(d))
        self.lnf_b = p("lnf.b", (d,), zeros=True)

    @property
    def item_feature_dim(self) -> int:
        return self.cfg.id_dim + 5 * self.cfg.meta_dim + self.cfg.visual_dim

    # -- tokenization -------------------------------------------------------

    def _ctx_codes(self, ctx: LocalContext | None) -> tuple[int, int, int]:
        if ctx is None or not self.cfg.use_local_context:
            return (0, 0, 0)
        return (_code(ctx.browse_category_id, self.vocab.categories), int(bool(ctx.is_search)),
                _code(ctx.search_query_id, self.vocab.queries))

    def tokenize(self, batch: Sequence[EncoderInput], catalog: Catalog) -> TokenBatch:
        n_ctx = self.cfg.num_context_tokens
        seqs = []
        for inp in batch:
            acts = list(inp.actions)
            if len(acts) > self.cfg.max_actions:
                acts = list(truncate_sequence(CustomerSequence(0, tuple(acts)), self.cfg.max_actions).actions)
            seqs.append(acts)
        B = len(batch)
        L = max((len(a) for a in seqs), default=0)
        item_ids = np.zeros((B, L), dtype=np.int64)
        action_type = np.zeros((B, L), dtype=np.int64)
        ts = np.zeros((B, L), dtype=np.int64)
        valid = np.zeros((B, L), dtype=bool)
        fused = np.zeros((B, L, 3), dtype=np.int64)
        global_codes = np.zeros((B, 2), dtype=np.int64)
        local_codes = np.zeros((B, 3), dtype=np.int64)
        for b, (inp, acts) in enumerate(zip(batch, seqs)):
            g = inp.global_ctx
            global_codes[b] = (_code(g.country_id, self.vocab.countries), _code(g.device_type_id, self.vocab.devices))
            local_codes[b] = self._ctx_codes(inp.local_ctx)
            n = len(acts)
            for i, a in enumerate(acts):
                item_ids[b, i] = a.item_id
                action_type[b, i] = ACTION_INDEX[a.action_type]
                ts[b, i] = a.timestamp
                nxt = acts[i + 1].context if i + 1 < n else inp.local_ctx
                fused[b, i] = self._ctx_codes(nxt)
            valid[b, :n] = True
        cat_rows = np.where(valid, catalog.rows(item_ids), -1)
        id_rows = np.where(valid, self.ids.rows(item_ids), 0)
        buckets = np.where(valid, timestamp_bucket(ts, self.cfg.train_origin), 0)
        sizes = [len(inp.summary_ids) for inp in batch]
        flat = np.array([i for inp in batch for i in inp.summary_ids], dtype=np.int64)
        weights = np.zeros((B, len(flat)))
        start = 0
        for b, s in enumerate(sizes):
            if s:
                weights[b, start:start + s] = 1.0 / s
            start += s
        return TokenBatch(
            lengths=np.array([n_ctx + len(a) for a in seqs], dtype=np.int64),
            item_rows=id_rows, item_cat_rows=cat_rows, action_type=action_type,
            time_bucket=buckets, fused_ctx=fused, global_codes=global_codes,
            local_codes=local_codes, summary_rows=catalog.rows(flat),
            summary_idrows=self.ids.rows(flat), summary_weights=weights)

    # -- embeddings ---------------------------------------------------------

    def item_features(self, cat_rows: np.ndarray, id_rows: np.ndarray, catalog: Catalog) -> Tensor:
        """Concatenated id, metadata and projected visual features, shape [..., F]."""
        known = cat_rows >= 0
        safe = np.where(known, cat_rows, 0)
        parts = [nn.embedding(self.id_emb, id_rows)]
        for f, table in zip(Catalog.FIELDS, self.meta_emb):
            codes = catalog.attrs[f][safe] if len(catalog) else np.zeros_like(safe)
            codes = np.where(known & (codes < table.shape[0]) & (codes >= 0), codes, 0)
            parts.append(nn.embedding(table, codes))
        if len(catalog):
            vis = np.where(known[..., None], catalog.visual[safe], 0.0)
        else:
            vis = np.zeros(cat_rows.shape + (self.d_pre,))
        parts.append(nn.linear(vis, self.vis_w, self.vis_b))
        return nn.concat(parts, axis=-1)

    def item_tokens(self, item_ids, catalog: Catalog) -> Tensor:
        """Item embeddings in model space (what the summary token averages)."""
        ids = np.asarray(item_ids, dtype=np.int64)
        feats = self.item_features(catalog.rows(ids), self.ids.rows(ids), catalog)
        return nn.linear(feats, self.item_w, self.item_b)

    def _ctx_features(self, codes: np.ndarray) -> Tensor:
        return nn.concat([nn.embedding(self.ctx_cat, codes[..., 0]),
                          nn.embedding(self.ctx_search, codes[..., 1]),
                          nn.embedding(self.ctx_query, codes[..., 2])], axis=-1)

    def embed(self, tb: TokenBatch, catalog: Catalog) -> Tensor:
        """Token matrix [B, T, d_model] for a tokenized batch."""
        cfg = self.cfg
        B, L = tb.item_rows.shape
        d = cfg.d_model
        g = nn.concat([nn.embedding(self.country, tb.global_codes[:, 0]),
                       nn.embedding(self.device, tb.global_codes[:, 1])], axis=-1)
        g_tok = nn.linear(g, self.global_w, self.global_b).reshape(B, 1, d)
        l_tok = nn.linear(self._ctx_features(tb.local_codes), self.local_w, self.local_b).reshape(B, 1, d)
        if tb.summary_weights.shape[1]:
            items = nn.linear(self.item_features(tb.summary_rows, tb.summary_idrows, catalog),
                              self.item_w, self.item_b)
            s_tok = nn.matmul(tb.summary_weights, items).reshape(B, 1, d)
        else:
            s_tok = Tensor(np.zeros((B, 1, d)))
        tokens = [g_tok, l_tok, s_tok][: cfg.num_context_tokens]
        if L:
            feats = [self.item_features(tb.item_cat_rows, tb.item_rows, catalog),
                     nn.embedding(self.act_emb, tb.action_type),
                     nn.embedding(self.time_emb, tb.time_bucket)]
            if cfg.fuse_local == "concat":
                feats.append(self._ctx_features(tb.fused_ctx))
                a_tok = nn.linear(nn.concat(feats, axis=-1), self.action_w, self.action_b)
            else:
                a_tok = nn.linear(nn.concat(feats, axis=-1), self.action_w, self.action_b)
                c_tok = nn.linear(self._ctx_features(tb.fused_ctx), self.local_w, self.local_b)
                a_tok = (a_tok + c_tok) * 0.5
            tokens.append(a_tok)
        return nn.concat(tokens, axis=1)

    # -- transformer --------------------------------------------------------

    def transform(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        cfg = self.cfg
        T = x.shape[1]
        if mask is None:
            mask = nn.causal_mask(T)
        act = nn.gelu if cfg.activation == "gelu" else nn.relu
        for lp in self.layers:
            h = nn.layer_norm(x, lp["ln1_g"], lp["ln1_b"])
            q = nn.linear(h, lp["wq"], lp["bq"])
            k = nn.linear(h, lp["wk"], lp["bk"])
            v = nn.linear(h, lp["wv"], lp["bv"])
            x = x + nn.linear(nn.attention(q, k, v, cfg.num_heads, mask), lp["wo"], lp["bo"])
            h = nn.layer_norm(x, lp["ln2_g"], lp["ln2_b"])
            x = x + nn.linear(act(nn.linear(h, lp["w1"], lp["b1"])), lp["w2"], lp["b2"])
        return nn.layer_norm(x, self.lnf_g, self.lnf_b)

    def encode_batch(self, tb: TokenBatch, catalog: Catalog) -> tuple[Tensor, Tensor]:
        """Hidden states [B, T, d] and the last real position of each row [B, d]."""
        hidden = self.transform(self.embed(tb, catalog))
        last = hidden[np.arange(tb.batch_size), tb.lengths - 1]
        return hidden, last

    def encode_inputs(self, batch: Sequence[EncoderInput], catalog: Catalog) -> tuple[Tensor, Tensor]:
        return self.encode_batch(self.tokenize(batch, catalog), catalog)

    # -- single-sequence API --------------------------------------------------

    def embed_action(self, action: Action, catalog: Catalog, next_ctx: LocalContext | None = None) -> np.ndarray:
        """The d_model input vector of one action token."""
        with nn.no_grad():
            tb = self.tokenize([EncoderInput([action], local_ctx=next_ctx or LocalContext())], catalog)
            return self.embed(tb, catalog).data[0, self.cfg.num_context_tokens].copy()

    def build_token_sequence(self, seq: CustomerSequence, g: GlobalContext, l: LocalContext,
                             catalog: Catalog, summary_ids: Sequence[int] | None = None) -> TokenSequence:
        if summary_ids is None:
            summary_ids = l.page_item_ids
        seq = truncate_sequence(seq, self.cfg.max_actions) if len(seq) else seq
        tb = self.tokenize([EncoderInput(seq.actions, g, l, tuple(summary_ids))], catalog)
        matrix = self.embed(tb, catalog)
        T = int(tb.lengths[0])
        n_ctx = self.cfg.num_context_tokens
        roles = ([ROLE_CONTEXT, ROLE_CONTEXT, ROLE_SUMMARY][:n_ctx] + [ROLE_ACTION] * (T - n_ctx))
        return TokenSequence(matrix.reshape(T, self.cfg.d_model), nn.causal_mask(T), roles)

    def encode(self, tokens: TokenSequence) -> tuple[Tensor, Tensor]:
        T, d = tokens.matrix.shape
        hidden = self.transform(tokens.matrix.reshape(1, T, d), tokens.mask).reshape(T, d)
        return hidden, hidden[T - 1]
