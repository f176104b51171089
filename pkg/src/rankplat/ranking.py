"""Multi-task pointwise ranker.

The customer side is the encoder's last position; the context tokens include a
summary slot holding the mean candidate embedding. Each head scores a candidate
as sigmoid(<f_h(u), g_h(v)> + offset_h(position)); the position offset is a
small separate network that is fed observed positions in training and a fixed
value at serving time.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn
from .domain import ACTION_TYPES, Action, Catalog, CustomerSequence, GlobalContext, LocalContext, ScoredItem
from .encoder import EncoderConfig, EncoderInput, IdVocab, SequenceEncoder, Vocab
from .nn import Tensor

logger = logging.getLogger(__name__)

HEADS = ACTION_TYPES
DEFAULT_HEAD_WEIGHTS = {"click": 1.0, "add_to_wishlist": 2.0, "add_to_cart": 3.0, "purchase": 4.0}
POSITION_SCALE = 100.0


class HeadWeights(dict):
    """action_type -> non-negative weight; at least one must be positive."""

    def __init__(self, weights: Mapping[str, float] | None = None):
        super().__init__({h: 0.0 for h in HEADS})
        for h, w in (DEFAULT_HEAD_WEIGHTS if weights is None else weights).items():
            if h not in self:
                raise ValueError(f"unknown head {h!r}")
            w = float(w)
            if not math.isfinite(w) or w < 0:
                raise ValueError(f"head weight for {h!r} must be finite and >= 0, got {w}")
            self[h] = w
        if not any(v > 0 for v in self.values()):
            raise ValueError("at least one head weight must be positive")

    def vector(self) -> np.ndarray:
        return np.array([self[h] for h in HEADS])


def blend(head_probs, weights: HeadWeights | Mapping[str, float]) -> np.ndarray | float:
    """Weighted sum over heads. ``head_probs`` is a head->prob mapping or an [..., 4] array."""
    w = weights if isinstance(weights, HeadWeights) else HeadWeights(weights)
    if isinstance(head_probs, Mapping):
        return float(sum(w[h] * float(head_probs[h]) for h in HEADS))
    return np.asarray(head_probs, dtype=np.float64) @ w.vector()


@dataclass(frozen=True)
class RankerConfig:
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        num_layers=2, num_heads=8, d_model=128, max_seq_len=80, activation="relu"))
    head_hidden: int = 128
    head_dim: int = 128
    use_position_branch: bool = True
    position_hidden: int = 16
    serving_position: int = 0
    neg_ratio: int = 4
    batch_size: int = 32
    seed: int = 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["encoder"] = self.encoder.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RankerConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


@dataclass
class RankingExample:
    """One logged page: history before the request, the listed items and their labels."""

    actions: tuple[Action, ...]
    candidates: np.ndarray           # [N] item ids
    labels: np.ndarray               # [N, 4] binary, columns in HEADS order
    positions: np.ndarray            # [N] displayed position (0 = top)
    global_ctx: GlobalContext = field(default_factory=GlobalContext)
    local_ctx: LocalContext = field(default_factory=LocalContext)
    customer_id: int = 0
    timestamp: int = 0

    def __post_init__(self):
        self.candidates = np.asarray(self.candidates, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(len(self.candidates), len(HEADS))
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(len(self.candidates))


class RankerModel:
    def __init__(self, cfg: RankerConfig, catalog: Catalog, vocab: Vocab, version: str = "v0"):
        self.cfg, self.vocab, self.version = cfg, vocab, version
        self.d_pre = catalog.d_pre
        rng = np.random.default_rng(cfg.seed)
        self.store = nn.ParameterStore()
        self.ids = IdVocab(catalog.ids)
        self.encoder = SequenceEncoder(cfg.encoder, vocab, self.ids, catalog.d_pre, self.store, rng, "ranker.")
        d, tn = cfg.encoder.d_model, nn.truncated_normal
        hh, hd = cfg.head_hidden, cfg.head_dim
        # 1/sqrt(fan_in) output init keeps initial head logits O(1)
        self.heads = []
        for h in HEADS:
            layer = {}
            for side in ("customer", "item"):
                pre = f"head.{h}.{side}."
                layer[side] = (
                    self.store.add(pre + "w1", rng.normal(0, 1 / math.sqrt(d), (d, hh))),
                    self.store.add(pre + "b1", np.zeros(hh)),
                    self.store.add(pre + "w2", rng.normal(0, 1 / math.sqrt(hh), (hh, hd))),
                    self.store.add(pre + "b2", np.zeros(hd)),
                )
            self.heads.append(layer)
        self.head_bias = self.store.add("head.bias", np.zeros(len(HEADS)))
        ph = cfg.position_hidden
        self.pos_w1 = self.store.add("position.w1", tn(rng, (1, ph), std=1.0))
        self.pos_b1 = self.store.add("position.b1", np.full(ph, 0.1))
        self.pos_w2 = self.store.add("position.w2", tn(rng, (ph, len(HEADS))))
        self.pos_b2 = self.store.add("position.b2", np.zeros(len(HEADS)))
        if not cfg.use_position_branch:
            self.store.set_trainable("position.", False)

    # -- forward ---------------------------------------------------------------

    @staticmethod
    def _ffn(x: Tensor, params) -> Tensor:
        w1, b1, w2, b2 = params
        return nn.linear(nn.relu(nn.linear(x, w1, b1)), w2, b2)

    def position_offsets(self, positions: np.ndarray) -> Tensor | None:
        if not self.cfg.use_position_branch:
            return None
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 1) / POSITION_SCALE
        return nn.linear(nn.relu(nn.linear(p, self.pos_w1, self.pos_b1)), self.pos_w2, self.pos_b2)

    def logits(self, inputs: Sequence[EncoderInput], candidates: np.ndarray, owner: np.ndarray,
               positions: np.ndarray, catalog: Catalog) -> Tensor:
        """Head logits [M, 4] for flat candidates; ``owner[m]`` is the input row of candidate m."""
        _, last = self.encoder.encode_inputs(inputs, catalog)
        items = self.encoder.item_tokens(candidates, catalog)
        cols = []
        for layer in self.heads:
            cu = self._ffn(last, layer["customer"])
            iv = self._ffn(items, layer["item"])
            cols.append(nn.sum_(nn.embedding(cu, owner) * iv, axis=-1, keepdims=True))
        z = nn.concat(cols, axis=-1) + self.head_bias
        off = self.position_offsets(positions)
        return z if off is None else z + off

    def probabilities(self, *args, **kwargs) -> Tensor:
        return nn.sigmoid(self.logits(*args, **kwargs))

    # -- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        self.store.save(path)
        meta = {"kind": "ranker", "version": self.version, "config": self.cfg.to_dict(),
                "vocab": asdict(self.vocab), "item_ids": self.ids.ids.tolist(), "d_pre": self.d_pre}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, path) -> "RankerModel":
        from .retrieval import _vocab_catalog
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        if meta.get("kind") != "ranker":
            raise ValueError(f"{path} is not a ranker checkpoint")
        ids = meta["item_ids"]
        model = cls(RankerConfig.from_dict(meta["config"]), _vocab_catalog(ids, ids, meta["d_pre"]),
                    Vocab(**meta["vocab"]), meta["version"])
        model.store.load(path)
        return model


# ---------------------------------------------------------------------------
# scoring


def score_candidates(model: RankerModel, seq: CustomerSequence | Sequence[Action], g: GlobalContext | None,
                     l: LocalContext | None, candidates, catalog: Catalog,
                     positions=None, position_mode: str = "fixed",
                     weights: HeadWeights | Mapping[str, float] | None = None) -> list[ScoredItem]:
    """One ScoredItem per candidate, in input order.

    ``position_mode="fixed"`` ignores ``positions`` entirely and feeds the configured
    serving position; ``"observed"`` uses the supplied display positions.
    """
    probs = score_matrix(model, seq, g, l, candidates, catalog, positions, position_mode)
    blended = blend(probs, weights if weights is not None else HeadWeights())
    return [ScoredItem(int(c), dict(zip(HEADS, map(float, p))), float(b))
            for c, p, b in zip(np.asarray(candidates).reshape(-1), probs, blended)]


def score_matrix(model: RankerModel, seq, g: GlobalContext | None, l: LocalContext | None, candidates,
                 catalog: Catalog, positions=None, position_mode: str = "fixed",
                 fixed_position: int | None = None) -> np.ndarray:
    """Head probabilities [N, 4] for one request."""
    cands = np.asarray(candidates, dtype=np.int64).reshape(-1)
    if not len(cands):
        raise ValueError("candidates must be non-empty")
    if position_mode == "fixed":
        p0 = model.cfg.serving_position if fixed_position is None else fixed_position
        pos = np.full(len(cands), p0)
    elif position_mode == "observed":
        if positions is None:
            raise ValueError("observed position mode needs positions")
        pos = np.asarray(positions, dtype=np.int64).reshape(-1)
        if len(pos) != len(cands):
            raise ValueError("positions and candidates differ in length")
    else:
        raise ValueError(f"unknown position_mode {position_mode!r}")
    actions = seq.actions if isinstance(seq, CustomerSequence) else tuple(seq)
    inp = EncoderInput(actions, g or GlobalContext(), l or LocalContext(), tuple(cands.tolist()))
    with nn.no_grad():
        p = model.probabilities([inp], cands, np.zeros(len(cands), np.int64), pos, catalog).data
    return p


# ---------------------------------------------------------------------------
# training


def multi_task_loss(predictions, labels, eps: float = 1e-7) -> Tensor:
    """-(1/N) sum_n sum_h [y log f + (1-y) log(1-f)], with f clamped to [eps, 1-eps]."""
    predictions = nn.as_tensor(predictions)
    y = np.asarray(labels, dtype=np.float64)
    if predictions.shape != y.shape:
        raise nn.ShapeError("multi_task_loss", f"predictions {predictions.shape} vs labels {y.shape}")
    n = predictions.shape[0] if predictions.ndim else 1
    return nn.sum_(nn.binary_cross_entropy(predictions, y, eps)) * (1.0 / max(n, 1))


def sample_training_candidates(labels: np.ndarray, neg_ratio: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of all positives plus up to ``neg_ratio`` negatives per positive from the rest of the page."""
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels.reshape(len(labels), -1).any(axis=1))
    neg = np.flatnonzero(~labels.reshape(len(labels), -1).any(axis=1))
    n_neg = min(neg_ratio * len(pos), len(neg))
    chosen = rng.choice(neg, size=n_neg, replace=False) if n_neg else np.zeros(0, np.int64)
    return np.concatenate([pos, np.sort(chosen)]).astype(np.int64)


def _example_input(model: RankerModel, ex: RankingExample) -> EncoderInput:
    return EncoderInput(ex.actions, ex.global_ctx, ex.local_ctx, tuple(ex.candidates.tolist()))


def ranker_batch_loss(model: RankerModel, batch: Sequence[RankingExample], catalog: Catalog,
                      rng: np.random.Generator) -> Tensor | None:
    inputs, cands, owner, pos, labels = [], [], [], [], []
    for ex in batch:
        sel = sample_training_candidates(ex.labels, model.cfg.neg_ratio, rng)
        if not len(sel):
            continue
        owner.append(np.full(len(sel), len(inputs)))
        inputs.append(_example_input(model, ex))
        cands.append(ex.candidates[sel])
        pos.append(ex.positions[sel])
        labels.append(ex.labels[sel])
    if not inputs:
        return None
    probs = model.probabilities(inputs, np.concatenate(cands), np.concatenate(owner),
                                np.concatenate(pos), catalog)
    return multi_task_loss(probs, np.concatenate(labels))


@dataclass
class RankerTrainResult:
    epoch_losses: list[float]
    batch_losses: list[float]


def train_ranker(model: RankerModel, dataset: Sequence[RankingExample], catalog: Catalog,
                 epochs: int = 2, lr: float = 0.001, seed: int | None = None,
                 callback: Callable[[int, float], None] | None = None) -> RankerTrainResult:
    """Pointwise multi-task training; position features come from observed display positions."""
    data = [ex for ex in dataset if ex.labels.any()]
    if not data:
        raise ValueError("ranker training needs at least one example with a positive label")
    rng = np.random.default_rng(model.cfg.seed if seed is None else seed)
    epoch_losses, batch_losses = [], []
    bs = model.cfg.batch_size
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for s in range(0, len(order), bs):
            batch = [data[i] for i in order[s:s + bs]]
            loss = ranker_batch_loss(model, batch, catalog, rng)
            if loss is None:
                continue
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite ranker loss at epoch {epoch}")
            nn.backward(loss)
            nn.adam_step(model.store, lr)
            batch_losses.append(value)
            total += value * len(batch)
            count += len(batch)
        epoch_losses.append(total / max(count, 1))
        logger.info("ranker epoch %d loss %.4f", epoch, epoch_losses[-1])
        if callback:
            callback(epoch, epoch_losses[-1])
    return RankerTrainResult(epoch_losses, batch_losses)
