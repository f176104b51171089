"""End-to-end acceptance checks, one test per criterion; each prints a PASS/FAIL line."""

import math
import threading
import time

import numpy as np
import pytest

from rankplat import nn
from rankplat.diagnostics import GRAD_TOLERANCE, gradcheck_report, theorem_table, wave_target
from rankplat.domain import GlobalContext, LocalContext, ScoredItem
from rankplat.encoder import EncoderConfig, Vocab
from rankplat.evaluation import (PipelineSystem, PopularitySystem, diversity_max_run, ndcg_at_k, ranking_examples,
                                 recall_at_k, requests_from_pages, run_protocol, temporal_split)
from rankplat.index import IndexParams, build_index
from rankplat.pipeline import ModelBundle, policy_seed, run_pipeline
from rankplat.policy import CandidatePools, PolicyConfig, mix_new_items
from rankplat.ranking import HeadWeights, RankerConfig, RankerModel, blend, score_matrix, train_ranker
from rankplat.retrieval import (EmbeddingSet, RetrievalConfig, TrainingSequence, TwoTowerModel,
                                export_item_embeddings, log_uniform_probs, log_uniform_sample, train_retrieval)
from rankplat.serving import Platform, PlatformConfig, RankRequest
from rankplat.synthetic import GeneratorConfig, generate
from rankplat.theorem import polynomial_two_tower_fit

from test_evaluation import ref_ndcg, ref_recall, ref_run
from test_policy import exploration_rate

RESULTS: dict[int, str] = {}
EVAL_REQUESTS = 1500


def record(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}  {name}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def vocab_for(corpus):
    cfg = corpus.cfg
    return Vocab.from_catalog(corpus.catalog, cfg.num_countries + 1, cfg.num_devices + 1,
                              len(corpus.query_category) + 1)


def retrieval_encoder(corpus, context=True):
    return EncoderConfig(num_layers=2, num_heads=4, d_model=64, max_seq_len=100, activation="gelu",
                         use_local_context=context, train_origin=corpus.cfg.start_time)


def ranker_encoder(corpus, d_model=128):
    return EncoderConfig(num_layers=2, num_heads=8, d_model=d_model, max_seq_len=80, activation="relu",
                         train_origin=corpus.cfg.start_time)


# ---------------------------------------------------------------------------
# shared trained models on the default corpus


@pytest.fixture(scope="module")
def world(default_corpus):
    c = default_corpus
    train, _ = temporal_split(c.actions, c.cfg.split_time)
    test_reqs = requests_from_pages(c.pages, c.actions, start=c.cfg.split_time)[:EVAL_REQUESTS]
    return c, train, test_reqs, vocab_for(c)


@pytest.fixture(scope="module")
def retrieval_runs(world):
    c, train, reqs, vocab = world
    data = [TrainingSequence(cid, tuple(a), c.global_ctx[cid]) for cid, a in sorted(train.items())]
    out = {}
    for name, ctx in (("tr+ctx", True), ("tr", False)):
        t = time.perf_counter()
        m = TwoTowerModel(RetrievalConfig(encoder=retrieval_encoder(c, ctx)), c.catalog, vocab, "v1")
        train_retrieval(m, data, c.catalog, epochs=3)
        out[name] = (m, time.perf_counter() - t)
    return out


@pytest.fixture(scope="module")
def bundle(world, retrieval_runs):
    c, train, reqs, vocab = world
    tt = retrieval_runs["tr+ctx"][0]
    exs = ranking_examples(requests_from_pages(c.pages, c.actions, end=c.cfg.split_time))
    rk = RankerModel(RankerConfig(encoder=ranker_encoder(c)), c.catalog, vocab, "v1")
    train_ranker(rk, exs, c.catalog, epochs=2)
    return ModelBundle(tt, build_index(export_item_embeddings(tt, c.catalog), "exact", c.catalog), rk)


# ---------------------------------------------------------------------------


def test_c01_gradient_integrity():
    t = time.perf_counter()
    report = gradcheck_report(seed=0, points=10, entries=2)
    elapsed = time.perf_counter() - t
    worst = max(report.values())
    ok = worst < GRAD_TOLERANCE and elapsed < 60 and {"retrieval_loss", "ranker_loss"} <= set(report)
    record(1, "gradient integrity", ok,
           f"{len(report)} checks x 10 points, max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")


def test_c02_metric_oracles():
    rng = np.random.default_rng(0)
    worst = 0.0
    runs_ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 21))
        ranked = rng.permutation(n).tolist()
        rel = set(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False).tolist())
        k = int(rng.integers(1, 11))
        worst = max(worst, abs(recall_at_k(ranked, rel, k) - ref_recall(ranked, rel, k)),
                    abs(ndcg_at_k(ranked, rel, k) - ref_ndcg(ranked, rel, k)))
        brands = rng.integers(0, 3, int(rng.integers(0, 21))).tolist()
        runs_ok &= diversity_max_run(brands) == ref_run(brands)
    hand = abs(ndcg_at_k(["x", "a"], {"a"}, 2) - 1 / math.log2(3)) < 1e-12 and diversity_max_run("AABA") == 2
    record(2, "metric oracle equivalence", worst <= 1e-12 and runs_ok and hand,
           f"1000 instances, max |diff| {worst:.1e}, runs exact={runs_ok}, hand values ok={hand}")


def test_c03_sampler_fidelity():
    rng = np.random.default_rng(0)
    n = 50
    draws = np.array([log_uniform_sample(n, 1, (), rng)[0] for _ in range(100_000)])
    tv = 0.5 * np.abs(np.bincount(draws, minlength=n) / len(draws) - log_uniform_probs(n)).sum()
    four = np.array([log_uniform_sample(4, 1, (), rng)[0] for _ in range(100_000)])
    p0 = float(np.mean(four == 0))
    ok = tv < 0.01 and abs(p0 - math.log(2) / math.log(5)) <= 0.01
    record(3, "sampler fidelity", ok, f"TV {tv:.4f} (< 0.01), P(rank 0 | 4 classes) {p0:.4f} vs 0.4307")


def test_c04_mixing_contract():
    t = time.perf_counter()
    s = [ScoredItem(i, {}, float(r)) for i, r in enumerate([0.3, 0.9, 0.5, 0.7])]
    n = [ScoredItem(10 + i, {}, float(r)) for i, r in enumerate([0.2, 0.6])]
    greedy = all(mix_new_items(CandidatePools(s, n), PolicyConfig(k=2, epsilon=0.0),
                               np.random.default_rng(seed)).item_ids == [1, 3, 2, 0, 11, 10] for seed in range(20))
    rates = {eps: exploration_rate(eps, 4, runs=10_000, seed=1) for eps in (0.1, 0.5)}
    rng = np.random.default_rng(2)
    perm = True
    for _ in range(500):
        S = [ScoredItem(i, {}, float(r)) for i, r in enumerate(rng.random(int(rng.integers(0, 15))) + 0.01)]
        N = [ScoredItem(100 + i, {}, float(r)) for i, r in enumerate(rng.random(int(rng.integers(0, 8))) + 0.01)]
        out = mix_new_items(CandidatePools(S, N), PolicyConfig(k=int(rng.integers(1, 8)), epsilon=float(rng.random())),
                            rng)
        perm &= sorted(out.item_ids) == sorted(x.item_id for x in S + N)
    elapsed = time.perf_counter() - t
    ok = greedy and perm and all(abs(r - e) <= 0.02 for e, r in rates.items()) and elapsed < 60
    record(4, "epsilon-greedy mixing contract", ok,
           f"eps=0 exact={greedy}, rates " + ", ".join(f"{e}->{r:.4f}" for e, r in rates.items())
           + f", permutation={perm}, {elapsed:.1f}s")


def test_c05_retrieval_uplift(world, retrieval_runs):
    c, train, reqs, vocab = world
    t = time.perf_counter()
    systems = [PopularitySystem(c.catalog, train, c.cfg.split_time)]
    for name, (m, _) in retrieval_runs.items():
        idx = build_index(export_item_embeddings(m, c.catalog), "exact", c.catalog)
        systems.append(PipelineSystem(ModelBundle(m, idx), c.catalog, use_ranker=False, name=name))
    reps = run_protocol(systems, reqs, c.catalog, ks=(50,), scoped=False)
    r = {n: rep.mean("recall", 50) for n, rep in reps.items()}
    total = time.perf_counter() - t + sum(s for _, s in retrieval_runs.values())
    vs_pop = r["tr+ctx"] / r["popularity"]
    ctx_gain = r["tr+ctx"] / r["tr"] - 1
    ok = vs_pop >= 1.2 and ctx_gain >= 0.05 and total < 1800
    record(5, "retrieval uplift", ok,
           f"Recall@50 popularity {r['popularity']:.4f}, context-free {r['tr']:.4f}, with context "
           f"{r['tr+ctx']:.4f}; x{vs_pop:.2f} vs popularity (>= 1.2), +{100 * ctx_gain:.1f}% from context "
           f"(>= 5%), train+eval {total / 60:.1f} min")


def test_c06_ranker_uplift(world, bundle):
    c, train, reqs, vocab = world
    systems = [PipelineSystem(bundle, c.catalog, use_ranker=False, name="retrieval"),
               PipelineSystem(bundle, c.catalog, use_ranker=True, policy=PolicyConfig(), name="full")]
    reps = run_protocol(systems, reqs, c.catalog, ks=(6,), scoped=True, query_category=c.query_category)
    a, b = reps["full"].mean("ndcg", 6), reps["retrieval"].mean("ndcg", 6)
    record(6, "ranker uplift", a >= 1.05 * b,
           f"NDCG@6 full {a:.4f} vs retrieval-only {b:.4f}: x{a / b:.3f} (>= 1.05)")


def top1_affinity_percentile(corpus, model, pages):
    pct = []
    for p in pages:
        hist = tuple(a for a in corpus.actions[p.customer_id] if a.timestamp < p.timestamp)
        s = blend(score_matrix(model, hist, p.global_ctx, p.context, np.array(p.item_ids), corpus.catalog),
                  HeadWeights())
        aff = corpus.truth.affinity(p.page_id, p.item_ids, corpus.cfg.affinity_temperature)
        top = int(np.argmax(s))
        pct.append((aff < aff[top]).mean() / (1 - 1 / len(aff)) if len(aff) > 1 else 1.0)
    return float(np.mean(pct))


def test_c07_position_debias(world, bundle):
    c = world[0]
    # (a) serve-time scores ignore displayed positions bit for bit
    rng = np.random.default_rng(0)
    cands = c.catalog.ids[:200]
    hist = c.actions[1]
    base = score_matrix(bundle.ranker, hist, GlobalContext(1, 1), LocalContext(2), cands, c.catalog)
    invariant = all(np.array_equal(base, score_matrix(bundle.ranker, hist, GlobalContext(1, 1), LocalContext(2),
                                                      cands, c.catalog, positions=rng.integers(0, 500, 200)))
                    for _ in range(5))
    # (b) non-inferiority on held-out planted relevance, smaller world with position-biased logging
    small = generate(GeneratorConfig(num_customers=3000, seed=1))
    vocab = vocab_for(small)
    exs = ranking_examples(requests_from_pages(small.pages, small.actions, end=small.cfg.split_time))
    held_out = [p for p in small.pages if p.timestamp >= small.cfg.split_time]
    pct = {}
    for branch in (True, False):
        cfg = RankerConfig(encoder=ranker_encoder(small, 64), use_position_branch=branch, head_hidden=64, head_dim=64)
        m = RankerModel(cfg, small.catalog, vocab, "p")
        train_ranker(m, exs, small.catalog, epochs=2)
        pct[branch] = top1_affinity_percentile(small, m, held_out)
    ok = invariant and pct[True] >= 0.99 * pct[False]
    record(7, "position-debias invariance", ok,
           f"bitwise invariant={invariant}; top-1 planted-affinity percentile with branch {pct[True]:.4f} vs "
           f"without {pct[False]:.4f} (ratio {pct[True] / pct[False]:.4f}, >= 0.99)")


def test_c08_ann_quality():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(10_000, 32))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    emb = EmbeddingSet("ann", np.arange(10_000, dtype=np.int64), v.astype(np.float32))
    exact = build_index(emb, "exact")
    approx = build_index(emb, "approximate", params=IndexParams(ef_search=64))
    queries = rng.normal(size=(200, 32))
    hits = sum(len(set(exact.search(q, 10)[0]) & set(approx.search(q, 10)[0])) for q in queries)
    recall = hits / (10 * len(queries))
    vf = emb.vectors
    brute_ok = all(exact.search(q, 100)[0].tolist()
                   == np.lexsort((emb.item_ids, -(vf @ q.astype(np.float32))))[:100].tolist() for q in queries[:50])
    record(8, "ANN quality", recall >= 0.95 and brute_ok,
           f"recall@10 {recall:.4f} (>= 0.95) on 10k unit vectors (d=32, ef_search=64); exact == brute force: "
           f"{brute_ok}")


def test_c09_blue_green_consistency():
    c = generate(GeneratorConfig(num_customers=200, num_items=800, seed=9))
    vocab = vocab_for(c)
    enc = EncoderConfig(num_layers=1, num_heads=2, d_model=16, max_seq_len=30, train_origin=c.cfg.start_time)
    versions = []
    for i in range(11):
        tt = TwoTowerModel(RetrievalConfig(encoder=enc, d_emb=16, seed=i), c.catalog, vocab, f"v{i}")
        rk = RankerModel(RankerConfig(encoder=enc, head_hidden=16, head_dim=16, seed=i), c.catalog, vocab, f"v{i}")
        versions.append((tt, export_item_embeddings(tt, c.catalog), rk))
    platform = Platform(PlatformConfig(), c.catalog, query_category=c.query_category)
    platform.deploy_version(*versions[0])
    for cid, acts in c.actions.items():
        for a in acts:
            platform.ingest_event(cid, a)
    bundles = {"v0": platform.bundle}
    now = c.cfg.end_time
    results, failures = [], []
    lock = threading.Lock()

    def client(w):
        r = np.random.default_rng(w)
        for _ in range(125):
            req = RankRequest(int(r.integers(1, 201)), category_id=int(r.integers(1, 21)), timestamp=now)
            resp = platform.handle_rank(req)
            with lock:
                (results if resp.status in ("ok", "unknown_category") else failures).append((req, resp))

    threads = [threading.Thread(target=client, args=(w,)) for w in range(8)]
    for t in threads:
        t.start()
    for v in versions[1:]:
        time.sleep(0.05)
        platform.deploy_version(*v)
        bundles[platform.model_version] = platform.bundle
    for t in threads:
        t.join()
    # replay each response against the single version it claims; any mixing shows as a mismatch
    mixed = 0
    for req, resp in results:
        if resp.status != "ok":
            continue
        b = bundles[resp.model_version]
        rng = np.random.default_rng(policy_seed(req.customer_id, now))
        res = run_pipeline(b, c.catalog, platform.cache.get(req.customer_id), req.global_ctx,
                           LocalContext(req.category_id), req.category_id,
                           max(platform.config.retrieval_depth, platform.config.page_size),
                           platform.config.head_weights, platform.config.policy, now, rng, fixed_position=0)
        page = res.page[:platform.config.page_size]
        mixed += [s.item_id for s in page] != resp.item_ids or [s.blended_score for s in page] != resp.scores
    seen = {r.model_version for _, r in results}
    ok = len(results) == 1000 and not failures and mixed == 0 and len(seen) >= 2
    record(9, "blue-green consistency", ok,
           f"{len(results)} responses, {len(failures)} failed, {mixed} mixed, {len(seen)} versions observed "
           f"across 10 swaps")


def test_c10_theorem_demo():
    t = time.perf_counter()
    poly = [polynomial_two_tower_fit(lambda c, a: c[:, 0] * a[:, 0], 1).max_error,
            polynomial_two_tower_fit(lambda c, a: (c[:, 0] + a[:, 0]) ** 2, 2).max_error,
            polynomial_two_tower_fit(lambda c, a: c[:, 0] ** 3 * a[:, 0] - a[:, 0] ** 2 + 1, 4).max_error]
    errs = [r["max_error"] for r in theorem_table([1, 2, 4, 6], wave_target)]
    elapsed = time.perf_counter() - t
    ok = max(poly) <= 1e-8 and all(b < a for a, b in zip(errs, errs[1:])) and elapsed < 10
    record(10, "theorem demo", ok,
           f"polynomial targets max err {max(poly):.1e} (<= 1e-8); wave errors "
           + ", ".join(f"{e:.2e}" for e in errs) + f" strictly decreasing; {elapsed:.2f}s")


def test_c11_latency():
    c = generate(GeneratorConfig(num_customers=300, num_items=100_000, seed=11))
    vocab = vocab_for(c)
    tt = TwoTowerModel(RetrievalConfig(encoder=retrieval_encoder(c)), c.catalog, vocab, "v1")
    rk = RankerModel(RankerConfig(encoder=ranker_encoder(c)), c.catalog, vocab, "v1")
    platform = Platform(PlatformConfig(), c.catalog, query_category=c.query_category)
    for cid, acts in c.actions.items():
        for a in acts:
            platform.ingest_event(cid, a)
    platform.deploy_version(tt, export_item_embeddings(tt, c.catalog), rk)
    rng = np.random.default_rng(0)
    cids = list(c.actions)
    now = c.cfg.end_time

    def request():
        scoped = rng.random() < 0.7
        return RankRequest(int(rng.choice(cids)), category_id=int(rng.integers(1, 21)) if scoped else None,
                           timestamp=now)

    for _ in range(200):
        platform.handle_rank(request())
    lat, bad = [], 0
    for _ in range(10_000):
        req = request()
        t = time.perf_counter()
        resp = platform.handle_rank(req)
        lat.append(time.perf_counter() - t)
        bad += resp.status != "ok" or len(resp.item_ids) != 84
    p50, p99 = (float(np.percentile(lat, q)) * 1000 for q in (50, 99))
    record(11, "latency", p99 < 50 and bad == 0,
           f"100k items, depth 500, 10k warm requests: p50 {p50:.1f} ms, p99 {p99:.1f} ms (< 50 ms), "
           f"{bad} short/failed")
