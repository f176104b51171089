"""Self-checks behind the ``gradcheck`` and ``theorem-demo`` commands."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import nn
from .encoder import EncoderConfig, Vocab
from .evaluation import ranking_examples, requests_from_pages
from .ranking import RankerConfig, RankerModel, ranker_batch_loss
from .retrieval import RetrievalConfig, TrainingSequence, TwoTowerModel, retrieval_batch_loss
from .synthetic import Corpus, GeneratorConfig, generate
from .theorem import polynomial_two_tower_fit

GRAD_TOLERANCE = 1e-4


def tiny_corpus(seed: int = 0) -> Corpus:
    return generate(GeneratorConfig(num_customers=12, num_items=60, num_brands=6, num_categories=4,
                                    latent_dim=4, visual_dim=6, sessions_mean=2.0, interactions_mean=3.0,
                                    page_size=12, span_days=30, test_days=5, seed=seed))


def _sq(x):
    return nn.sum_(x * x)


def _primitive_checks(rng: np.random.Generator) -> dict[str, Callable[[], tuple[Callable, list]]]:
    def leaf(*shape):
        return nn.Tensor(rng.normal(size=shape), requires_grad=True)

    def case(fn, *shapes):
        def make():
            xs = [leaf(*s) for s in shapes]
            return (lambda: fn(*xs)), xs
        return make

    mask = nn.causal_mask(5)
    labels = (rng.random((4, 3)) < 0.5).astype(float)
    return {
        "matmul": case(lambda a, b: _sq(nn.matmul(a, b)), (3, 4), (4, 2)),
        "gelu": case(lambda x: nn.sum_(nn.gelu(x) * x), (4, 5)),
        "softmax": case(lambda x, w: nn.sum_(nn.softmax(x) * w), (3, 6), (3, 6)),
        "log_softmax": case(lambda x: nn.sum_(nn.index(nn.log_softmax(x), (np.arange(3), np.array([0, 2, 5])))),
                            (3, 6)),
        "layer_norm": case(lambda x, g, b: nn.sum_(nn.layer_norm(x, g, b) * x), (4, 6), (6,), (6,)),
        "attention": case(lambda q, k, v: _sq(nn.attention(q, k, v, 2, mask)), (2, 5, 4), (2, 5, 4),
                          (2, 5, 4)),
        "embedding": case(lambda t: _sq(nn.embedding(t, np.array([0, 2, 2, 1]))), (3, 4)),
        "bce": case(lambda z: nn.sum_(nn.binary_cross_entropy(nn.sigmoid(z), labels)), (4, 3)),
        "concat": case(lambda a, b: _sq(nn.concat([a, b], axis=1) * a[:, :1]), (2, 3), (2, 2)),
        "add_sub": case(lambda a, b: _sq(nn.sub(nn.add(a, b), nn.mul(a, a))), (3, 4), (4,)),
        "div": case(lambda a, b: nn.sum_(nn.div(a, nn.add(nn.mul(b, b), 1.0))), (3, 4), (3, 4)),
        "exp_log": case(lambda x: nn.sum_(nn.log(nn.add(nn.exp(x), 1.0))), (3, 4)),
        "clip": case(lambda x: _sq(nn.clip(x, -10.0, 10.0)), (3, 4)),
        "relu": case(lambda x: _sq(nn.relu(x) + x), (4, 5)),
        "sigmoid": case(lambda x: _sq(nn.sigmoid(x)), (4, 5)),
        "linear": case(lambda x, w, b: _sq(nn.linear(x, w, b)), (3, 4), (4, 5), (5,)),
        "mean": case(lambda x: _sq(nn.mean(x, axis=0)), (3, 4)),
        "reshape_transpose": case(lambda x: _sq(nn.transpose(nn.reshape(x, (4, 3))) * x), (3, 4)),
        "masked_fill": case(lambda x: nn.sum_(nn.softmax(nn.masked_fill(x, mask, -1e9)) * x), (5, 5)),
    }


def _model_checks(corpus: Corpus, seed: int):
    """(loss_fn, params, reset) per model; ``reset(rng)`` moves the model to a new random point."""
    cat = corpus.catalog
    cfg = corpus.cfg
    vocab = Vocab.from_catalog(cat, cfg.num_countries + 1, cfg.num_devices + 1, len(corpus.query_category) + 1)
    enc = dict(num_layers=1, num_heads=2, d_model=8, max_seq_len=12, activation="gelu",
               train_origin=cfg.start_time, id_dim=4, meta_dim=2, visual_dim=4, action_dim=2, time_dim=2,
               context_dim=2)
    seqs = [TrainingSequence(cid, tuple(a[:6]), corpus.global_ctx[cid])
            for cid, a in sorted(corpus.actions.items())[:3] if a]
    exs = [e for e in ranking_examples(requests_from_pages(corpus.pages, corpus.actions)) if e.labels.any()][:3]
    for e in exs:
        e.actions = e.actions[-5:]
    sample_seed = [seed]

    def point(model):
        init = {n: t.data.copy() for n, t in model.store.items()}

        # jitter around the initial values: zero-initialised biases put relu
        # inputs exactly on the kink, where central differences are meaningless
        def reset(rng):
            for n, t in model.store.items():
                t.data[...] = init[n] + rng.normal(0.0, 0.05, t.data.shape)
            sample_seed[0] = int(rng.integers(2**31))
        return reset

    checks = {}
    for tag, trainable in (("retrieval_loss", True), ("retrieval_loss_ntr", False)):
        tt = TwoTowerModel(RetrievalConfig(encoder=EncoderConfig(**enc), d_emb=6, item_trainable=trainable,
                                           seed=seed), cat, vocab, "gc")
        checks[tag] = (lambda m=tt: retrieval_batch_loss(m, seqs, cat, np.random.default_rng(sample_seed[0])),
                       tt.store.trainable(), point(tt))
    rk = RankerModel(RankerConfig(encoder=EncoderConfig(**enc), head_hidden=6, head_dim=4, seed=seed),
                     cat, vocab, "gc")
    checks["ranker_loss"] = (lambda: ranker_batch_loss(rk, exs, cat, np.random.default_rng(sample_seed[0])),
                             rk.store.trainable(), point(rk))
    return checks


def gradcheck_report(seed: int = 0, points: int = 10, entries: int = 2) -> dict[str, float]:
    """Max relative error per check over ``points`` random points.

    Primitives get fresh random inputs at every point and are checked in full; the
    model losses get freshly jittered parameters and negatives, with ``entries``
    random coordinates perturbed per parameter tensor.
    """
    rng = np.random.default_rng(seed)
    out: dict[str, float] = {}
    models = _model_checks(tiny_corpus(seed), seed)
    for _ in range(points):
        for name, make in _primitive_checks(rng).items():
            fn, xs = make()
            out[name] = max(out.get(name, 0.0), nn.grad_check(fn, xs, rng=rng))
        for name, (fn, params, reset) in models.items():
            reset(rng)
            out[name] = max(out.get(name, 0.0), nn.grad_check(fn, params, max_entries=entries, rng=rng))
    return {k: float(v) for k, v in out.items()}


# ---------------------------------------------------------------------------
# universal approximation demo


def wave_target(c: np.ndarray, a: np.ndarray) -> np.ndarray:
    """sin(pi c) cos(pi a): smooth, and not a finite sum of monomials."""
    return np.sin(np.pi * c[:, 0]) * np.cos(np.pi * a[:, 0])


def theorem_table(degrees: Sequence[int], target=wave_target, grid_points: int = 41) -> list[dict]:
    rows = []
    for d in degrees:
        fit = polynomial_two_tower_fit(target, d, 1, 1, grid_points)
        rows.append({"degree": int(d), "embedding_size": fit.embedding_size, "max_error": fit.max_error})
    return rows
