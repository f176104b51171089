"""Two-tower candidate generation trained with sampled softmax.

The customer tower is a :class:`~rankplat.encoder.SequenceEncoder` followed by
a linear map to ``d_emb``; the item tower sums a per-item embedding
(initialized from a projection of the visual vector) with projected metadata
embeddings. Training is next-item prediction at every position of each
customer sequence, one pass over every sequence per epoch, with log-uniform
negatives and a logQ correction.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .domain import Action, Catalog, CustomerSequence, GlobalContext, LocalContext
from .encoder import EncoderConfig, EncoderInput, IdVocab, SequenceEncoder, Vocab
from .nn import Tensor

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"RKE1"
NEGATIVE_RATIO = 0.0042
LOGIT_CLAMP = 50.0


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# log-uniform sampling


def log_uniform_probs(num_classes: int) -> np.ndarray:
    """P(rank i) = log((i+2)/(i+1)) / log(num_classes+1)."""
    i = np.arange(num_classes, dtype=np.float64)
    return np.log((i + 2.0) / (i + 1.0)) / np.log(num_classes + 1.0)


def num_negatives(num_classes: int, ratio: float = NEGATIVE_RATIO) -> int:
    return max(1, math.ceil(ratio * num_classes))


def _draw_ranks(num_classes: int, shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    ranks = np.floor(np.exp(u * np.log(num_classes + 1.0))).astype(np.int64) - 1
    return np.clip(ranks, 0, num_classes - 1)


def log_uniform_sample(num_classes: int, num_samples: int, exclude, rng: np.random.Generator) -> np.ndarray:
    """Distinct ranks drawn log-uniformly, none of them in ``exclude``."""
    exclude = {int(e) for e in exclude if 0 <= int(e) < num_classes}
    if num_samples < 0 or num_samples > num_classes - len(exclude):
        raise ValueError(f"cannot draw {num_samples} distinct classes from "
                         f"{num_classes} with {len(exclude)} excluded")
    probs = log_uniform_probs(num_classes)
    excluded_mass = float(probs[list(exclude)].sum()) if exclude else 0.0
    if excluded_mass > 0.5 or num_samples > num_classes // 2:
        # rejection would stall; draw sequentially from the renormalized remainder
        p = probs.copy()
        p[list(exclude)] = 0.0
        out = []
        for _ in range(num_samples):
            k = int(rng.choice(num_classes, p=p / p.sum()))
            out.append(k)
            p[k] = 0.0
        return np.array(out, dtype=np.int64)
    out: list[int] = []
    taken = set(exclude)
    while len(out) < num_samples:
        for k in _draw_ranks(num_classes, 2 * (num_samples - len(out)) + 4, rng):
            k = int(k)
            if k not in taken:
                taken.add(k)
                out.append(k)
                if len(out) == num_samples:
                    break
    return np.array(out, dtype=np.int64)


def sample_negative_matrix(num_classes: int, num_samples: int, positive_ranks: np.ndarray,
                           rng: np.random.Generator) -> np.ndarray:
    """[P, num_samples] ranks; each row distinct and excluding that row's positive."""
    P = len(positive_ranks)
    out = _draw_ranks(num_classes, (P, num_samples), rng)
    pos = np.asarray(positive_ranks)[:, None]
    for _ in range(1000):
        srt = np.sort(out, axis=1)
        bad = (out == pos).any(axis=1) | (srt[:, 1:] == srt[:, :-1]).any(axis=1)
        if not bad.any():
            return out
        out[bad] = _draw_ranks(num_classes, (int(bad.sum()), num_samples), rng)
    rows = np.flatnonzero(bad)
    for r in rows:
        out[r] = log_uniform_sample(num_classes, num_samples, {int(positive_ranks[r])}, rng)
    return out


# ---------------------------------------------------------------------------
# loss


def sampled_softmax_from_logits(logits: Tensor, log_q: np.ndarray | None = None,
                                valid: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy with the positive in column 0.

    ``log_q`` (same shape as ``logits``) is subtracted before the softmax;
    ``valid`` masks out negative columns that must not compete.
    """
    z = nn.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    if log_q is not None:
        z = z - log_q
    if valid is not None:
        z = nn.masked_fill(z, ~valid, nn.tensor.MASK_FILL)
    return -nn.log_softmax(z, axis=-1)[:, 0].mean()


def sampled_softmax_loss(customer_emb: Tensor, positive_emb: Tensor, negative_emb: Tensor,
                         positive_log_q: np.ndarray | None = None, negative_log_q: np.ndarray | None = None,
                         positive_bias: Tensor | None = None, negative_bias: Tensor | None = None) -> Tensor:
    """customer [P, d], positive [P, d], negatives [P, n, d] -> scalar loss."""
    pos = (customer_emb * positive_emb).sum(axis=-1).reshape(-1, 1)
    P, d = customer_emb.shape
    neg = (customer_emb.reshape(P, 1, d) * negative_emb).sum(axis=-1)
    if positive_bias is not None:
        pos = pos + positive_bias.reshape(-1, 1)
    if negative_bias is not None:
        neg = neg + negative_bias
    logits = nn.concat([pos, neg], axis=1)
    log_q = None
    if positive_log_q is not None:
        log_q = np.concatenate([np.asarray(positive_log_q).reshape(-1, 1), negative_log_q], axis=1)
    return sampled_softmax_from_logits(logits, log_q)


# ---------------------------------------------------------------------------
# model


@dataclass
class RetrievalConfig:
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        num_layers=2, num_heads=4, d_model=64, max_seq_len=100, activation="gelu"))
    d_emb: int = 64
    item_trainable: bool = True
    logq_correction: bool = True
    negative_ratio: float = NEGATIVE_RATIO
    hard_negatives: bool = False          # swap part of the negatives for same-category items
    hard_negative_fraction: float = 0.5
    batch_size: int = 64
    seed: int = 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["encoder"] = self.encoder.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievalConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


class TwoTowerModel:
    def __init__(self, cfg: RetrievalConfig, catalog: Catalog, vocab: Vocab, version: str = "v0"):
        self.cfg, self.vocab, self.version = cfg, vocab, version
        self.d_pre = catalog.d_pre
        rng = np.random.default_rng(cfg.seed)
        self.store = nn.ParameterStore()
        self.ids = IdVocab(catalog.ids)
        self.encoder = SequenceEncoder(cfg.encoder, vocab, self.ids, catalog.d_pre, self.store, rng, "customer.")
        d, tn = cfg.d_emb, nn.truncated_normal
        self.out_w = self.store.add("customer.out.w", tn(rng, (cfg.encoder.d_model, d)))
        self.out_b = self.store.add("customer.out.b", np.zeros(d))
        # fixed projection that seeds the per-item embeddings from visual vectors
        vis_init = rng.normal(0.0, 1.0 / math.sqrt(max(catalog.d_pre, 1)), (max(catalog.d_pre, 1), d))
        self.visual_init = self.store.add("item.visual_init", vis_init, trainable=False)
        table = np.zeros((len(self.ids), d))
        rows = self.ids.rows(catalog.ids)
        table[rows] = catalog.visual @ vis_init if catalog.d_pre else 0.0
        self.item_id = self.store.add("item.id", table)
        sizes = (vocab.brands, vocab.categories, vocab.colors, vocab.materials, vocab.patterns)
        self.item_meta = [self.store.add(f"item.meta.{f}", tn(rng, (n, 8))) for f, n in zip(Catalog.FIELDS, sizes)]
        self.item_meta_w = self.store.add("item.meta.w", tn(rng, (40, d)))
        self.pop_bias = None
        if not cfg.item_trainable:
            self.store.set_trainable("item.", False)
            self.pop_bias = self.store.add("bias.popularity", np.zeros((len(self.ids), 1)))
        # popularity order of the training catalog, for negative sampling
        self.rank_to_id = catalog.ids[np.argsort(catalog.popularity_rank, kind="stable")]
        self._log_q = np.log(log_uniform_probs(len(catalog)))

    # -- towers ---------------------------------------------------------------

    def item_embeddings(self, item_ids, catalog: Catalog) -> Tensor:
        ids = np.asarray(item_ids, dtype=np.int64)
        id_rows = self.ids.rows(ids)
        cat_rows = catalog.rows(ids)
        known = cat_rows >= 0
        safe = np.where(known, cat_rows, 0)
        idv = nn.embedding(self.item_id, id_rows)
        if (id_rows == 0).any() and len(catalog):
            # items unseen in training fall back to their visual projection
            vis = np.where(known[:, None], catalog.visual[safe], 0.0)
            fresh = (id_rows == 0)[:, None].astype(np.float64)
            idv = idv + nn.matmul(vis, self.visual_init) * fresh
        parts = []
        for f, table in zip(Catalog.FIELDS, self.item_meta):
            codes = catalog.attrs[f][safe] if len(catalog) else np.zeros_like(safe)
            codes = np.where(known & (codes >= 0) & (codes < table.shape[0]), codes, 0)
            parts.append(nn.embedding(table, codes))
        return idv + nn.matmul(nn.concat(parts, axis=-1), self.item_meta_w)

    def item_bias(self, item_ids) -> Tensor | None:
        if self.pop_bias is None:
            return None
        return nn.embedding(self.pop_bias, self.ids.rows(item_ids)).reshape(-1)

    def project_customer(self, hidden: Tensor) -> Tensor:
        return nn.linear(hidden, self.out_w, self.out_b)

    def customer_embeddings(self, inputs: Sequence[EncoderInput], catalog: Catalog) -> Tensor:
        _, last = self.encoder.encode_inputs(inputs, catalog)
        return self.project_customer(last)

    @property
    def index_dim(self) -> int:
        """Width of exported vectors; the popularity bias rides in an extra column."""
        return self.cfg.d_emb + (1 if self.pop_bias is not None else 0)

    def save(self, path) -> None:
        path = Path(path)
        self.store.save(path)
        meta = {"kind": "two_tower", "version": self.version, "config": self.cfg.to_dict(),
                "vocab": asdict(self.vocab), "item_ids": self.ids.ids.tolist(),
                "rank_to_id": self.rank_to_id.tolist(), "d_pre": self.d_pre}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, path, catalog: Catalog) -> "TwoTowerModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        if meta.get("kind") != "two_tower":
            raise ValueError(f"{path} is not a two-tower checkpoint")
        cfg = RetrievalConfig.from_dict(meta["config"])
        train_cat = _vocab_catalog(meta["item_ids"], meta["rank_to_id"], meta["d_pre"])
        model = cls(cfg, train_cat, Vocab(**meta["vocab"]), meta["version"])
        model.store.load(path)
        return model


def _vocab_catalog(item_ids, rank_to_id, d_pre) -> Catalog:
    """A feature-less catalog carrying only ids and popularity order (for reload)."""
    from .domain import Item
    rank = {int(i): r for r, i in enumerate(rank_to_id)}
    items = [Item(int(i), 0, 0, 0, 0, 0, (0.0,) * d_pre, 0, rank.get(int(i), 0)) for i in item_ids]
    return Catalog(items)


# ---------------------------------------------------------------------------
# serving helpers


def encoder_input(model_or_encoder, seq: CustomerSequence | Sequence[Action], g: GlobalContext | None,
                  l: LocalContext | None, summary_ids: Sequence[int] | None = None) -> EncoderInput:
    actions = seq.actions if isinstance(seq, CustomerSequence) else tuple(seq)
    l = l or LocalContext()
    if summary_ids is None:
        summary_ids = l.page_item_ids
    return EncoderInput(actions, g or GlobalContext(), l, tuple(summary_ids))


def embed_customers(model: TwoTowerModel, inputs: Sequence[EncoderInput], catalog: Catalog) -> np.ndarray:
    """Customer vectors in index space (an extra 1 column when a bias is exported)."""
    with nn.no_grad():
        u = model.customer_embeddings(inputs, catalog).data
    if model.pop_bias is not None:
        u = np.concatenate([u, np.ones((len(u), 1))], axis=1)
    return u


def embed_customer(model: TwoTowerModel, seq, g: GlobalContext | None, l: LocalContext | None,
                   catalog: Catalog) -> np.ndarray:
    return embed_customers(model, [encoder_input(model, seq, g, l)], catalog)[0]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingSequence:
    """A customer's time-ordered training actions plus global context."""

    customer_id: int
    actions: tuple[Action, ...]
    global_ctx: GlobalContext = field(default_factory=GlobalContext)


@dataclass
class TrainResult:
    epoch_losses: list[float]
    batch_losses: list[float]


def clm_input(seq: TrainingSequence, max_actions: int) -> tuple[EncoderInput, np.ndarray]:
    """Inputs a_1..a_{n-1} and targets a_1..a_n (the summary slot predicts a_1)."""
    acts = seq.actions[-(max_actions + 1):]
    local = acts[-1].context or LocalContext()
    inp = EncoderInput(acts[:-1], seq.global_ctx, LocalContext(
        local.browse_category_id, local.is_search, local.search_query_id))
    return inp, np.array([a.item_id for a in acts], dtype=np.int64)


def _batches(lengths: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(len(lengths))
    chunk = batch_size * 16
    batches = []
    for s in range(0, len(order), chunk):
        part = order[s:s + chunk]
        part = part[np.argsort(lengths[part], kind="stable")]
        batches.extend(part[i:i + batch_size] for i in range(0, len(part), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def retrieval_batch_loss(model: TwoTowerModel, seqs: Sequence[TrainingSequence], catalog: Catalog,
                         rng: np.random.Generator, negatives: np.ndarray | None = None) -> Tensor:
    """Sampled-softmax loss over every target position of a batch of sequences."""
    enc = model.encoder
    pairs = [clm_input(s, enc.cfg.max_actions) for s in seqs]
    inputs = [p[0] for p in pairs]
    tb = enc.tokenize(inputs, catalog)
    hidden = enc.transform(enc.embed(tb, catalog))
    n_ctx = enc.cfg.num_context_tokens
    rows, cols, targets = [], [], []
    for b, (_, tgt) in enumerate(pairs):
        n = len(tgt)
        rows.extend([b] * n)
        cols.extend(range(n_ctx - 1, n_ctx - 1 + n))
        targets.append(tgt)
    targets = np.concatenate(targets)
    u = model.project_customer(hidden[np.array(rows), np.array(cols)])
    n_classes = len(model.rank_to_id)
    pos_rank = _ranks_of(model, targets)
    hard = None
    if negatives is None:
        n_neg = num_negatives(n_classes, model.cfg.negative_ratio)
        negatives = sample_negative_matrix(n_classes, n_neg, pos_rank, rng)
        if model.cfg.hard_negatives:
            cats = np.concatenate([[_browse_category(a) for a in s.actions[-(enc.cfg.max_actions + 1):]]
                                   for s in seqs])
            hard = _hard_negatives(model, catalog, negatives, pos_rank, cats, rng)
    neg_ids = model.rank_to_id[negatives]
    uniq, inv = np.unique(np.concatenate([targets, neg_ids.reshape(-1)]), return_inverse=True)
    table = model.item_embeddings(uniq, catalog)
    P = len(targets)
    pos_e = nn.embedding(table, inv[:P])
    neg_e = nn.embedding(table, inv[P:].reshape(negatives.shape))
    pos_q = neg_q = None
    if model.cfg.logq_correction:
        pos_q = np.where(pos_rank >= 0, model._log_q[np.maximum(pos_rank, 0)], model._log_q[-1])
        neg_q = model._log_q[negatives]
        if hard is not None:
            neg_q = np.where(hard[0], hard[1], neg_q)
    pos_b = neg_b = None
    if model.pop_bias is not None:
        bias = model.item_bias(uniq)
        pos_b = bias[inv[:P]]
        neg_b = bias[inv[P:].reshape(negatives.shape)]
    return sampled_softmax_loss(u, pos_e, neg_e, pos_q, neg_q, pos_b, neg_b)


def _browse_category(a: Action) -> int:
    c = a.context.browse_category_id if a.context is not None else None
    return -1 if c is None else int(c)


def _hard_negatives(model: TwoTowerModel, catalog: Catalog, negatives: np.ndarray, pos_rank: np.ndarray,
                    cats: np.ndarray, rng: np.random.Generator):
    """Overwrite the trailing columns of ``negatives`` in place with uniform draws from the
    browsed category of each target. Returns (mask of replaced cells, their log expected counts)."""
    if not hasattr(model, "_cat_ranks"):
        rank_cat = catalog.category[np.maximum(catalog.rows(model.rank_to_id), 0)]
        model._cat_ranks = {int(c): np.flatnonzero(rank_cat == c) for c in np.unique(rank_cat)}
    n_hard = int(round(model.cfg.hard_negative_fraction * negatives.shape[1]))
    mask = np.zeros(negatives.shape, dtype=bool)
    log_q = np.zeros(negatives.shape)
    if n_hard < 1:
        return mask, log_q
    for r, c in enumerate(cats):
        pool = model._cat_ranks.get(int(c))
        if pool is None:
            continue
        pool = pool[pool != pos_rank[r]]
        if len(pool) < n_hard:
            continue
        negatives[r, -n_hard:] = rng.choice(pool, size=n_hard, replace=False)
        mask[r, -n_hard:] = True
        log_q[r, -n_hard:] = math.log(n_hard / len(pool))
    return mask, log_q


def _ranks_of(model: TwoTowerModel, item_ids: np.ndarray) -> np.ndarray:
    if not hasattr(model, "_id_to_rank"):
        model._id_to_rank = {int(i): r for r, i in enumerate(model.rank_to_id)}
    lut = model._id_to_rank
    return np.array([lut.get(int(i), -1) for i in item_ids], dtype=np.int64)


def train_retrieval(model: TwoTowerModel, dataset: Sequence[TrainingSequence], catalog: Catalog,
                    epochs: int = 20, lr: float = 0.001, seed: int | None = None,
                    callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Next-item training; every sequence is processed once per epoch."""
    data = [s for s in dataset if len(s.actions) >= 1]
    if not data:
        raise ValueError("retrieval training needs at least one non-empty sequence")
    rng = np.random.default_rng(model.cfg.seed if seed is None else seed)
    lengths = np.array([len(s.actions) for s in data])
    epoch_losses, batch_losses = [], []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for idx in _batches(lengths, model.cfg.batch_size, rng):
            batch = [data[i] for i in idx]
            loss = retrieval_batch_loss(model, batch, catalog, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}; customers "
                                    f"{[s.customer_id for s in batch[:10]]}")
            nn.backward(loss)
            nn.adam_step(model.store, lr)
            batch_losses.append(value)
            total += value * len(batch)
            count += len(batch)
        epoch_losses.append(total / count)
        logger.info("retrieval epoch %d loss %.4f", epoch, epoch_losses[-1])
        if callback:
            callback(epoch, epoch_losses[-1])
    return TrainResult(epoch_losses, batch_losses)


def full_softmax_probs(model: TwoTowerModel, inp: EncoderInput, catalog: Catalog) -> np.ndarray:
    """Exact next-item distribution over the catalog (small catalogs, for tests)."""
    with nn.no_grad():
        u = model.customer_embeddings([inp], catalog).data[0]
        v = model.item_embeddings(catalog.ids, catalog).data
        z = v @ u
        if model.pop_bias is not None:
            z = z + model.item_bias(catalog.ids).data
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


# ---------------------------------------------------------------------------
# embedding sets


@dataclass
class EmbeddingSet:
    model_version: str
    item_ids: np.ndarray
    vectors: np.ndarray  # float32 [count, d]

    @property
    def d_emb(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.item_ids)

    def save(self, path) -> None:
        raw = self.model_version.encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(EMBEDDING_MAGIC)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", self.d_emb, len(self)))
            rows = np.zeros(len(self), dtype=[("id", "<i8"), ("v", "<f4", (self.d_emb,))])
            rows["id"] = self.item_ids
            rows["v"] = self.vectors
            fh.write(rows.tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingSet":
        buf = Path(path).read_bytes()
        if buf[:4] != EMBEDDING_MAGIC:
            raise ValueError(f"{path}: not an RKE1 embedding file")
        (n,) = struct.unpack_from("<I", buf, 4)
        version = buf[8:8 + n].decode("utf-8")
        d, count = struct.unpack_from("<II", buf, 8 + n)
        dt = np.dtype([("id", "<i8"), ("v", "<f4", (d,))])
        rows = np.frombuffer(buf, dtype=dt, count=count, offset=16 + n)
        return cls(version, rows["id"].astype(np.int64), rows["v"].astype(np.float32))


def export_item_embeddings(model: TwoTowerModel, catalog: Catalog, model_version: str | None = None,
                           batch_size: int = 4096) -> EmbeddingSet:
    version = model.version if model_version is None else model_version
    out = []
    with nn.no_grad():
        for s in range(0, len(catalog), batch_size):
            ids = catalog.ids[s:s + batch_size]
            v = model.item_embeddings(ids, catalog).data
            if model.pop_bias is not None:
                v = np.concatenate([v, model.item_bias(ids).data[:, None]], axis=1)
            out.append(v)
    vectors = np.concatenate(out) if out else np.zeros((0, model.index_dim))
    return EmbeddingSet(version, catalog.ids.copy(), vectors.astype(np.float32))
