"""Command-line entry points: ``rankplat <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .domain import read_catalog, read_events
from .encoder import EncoderConfig, Vocab
from .evaluation import (PipelineSystem, PopularitySystem, format_table, ranking_examples, requests_from_pages,
                         run_protocol, temporal_split, write_report)
from .index import IndexParams, build_index
from .pipeline import ModelBundle
from .policy import PolicyConfig
from .ranking import RankerConfig, RankerModel, train_ranker
from .retrieval import (EmbeddingSet, RetrievalConfig, TrainingSequence, TwoTowerModel, export_item_embeddings,
                        train_retrieval)
from .synthetic import GeneratorConfig, generate, read_pages, read_world, write_corpus

logger = logging.getLogger("rankplat")

SYSTEMS = ("popularity", "retrieval", "ranker", "full")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True, default=float))
    else:
        print(text if text is not None else "\n".join(f"{k}: {v}" for k, v in payload.items()))


def _load(data_dir):
    d = Path(data_dir)
    catalog = read_catalog(d / "catalog.jsonl")
    actions, gctx = read_events(d / "events.jsonl")
    world = read_world(d / "world.json")
    return catalog, actions, gctx, world


def _out(path) -> str:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return str(path)


def _vocab(catalog, world) -> Vocab:
    return Vocab.from_catalog(catalog, world["num_countries"] + 1, world["num_devices"] + 1,
                              world["num_queries"] + 1)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    cfg = GeneratorConfig(num_customers=args.customers, num_items=args.items, seed=args.seed)
    corpus = generate(cfg)
    paths = write_corpus(corpus, args.out)
    n = sum(len(a) for a in corpus.actions.values())
    _emit(args, {"customers": len(corpus.actions), "items": len(corpus.items), "actions": n,
                 "pages": len(corpus.pages), "files": sorted(str(p) for p in paths.values())})
    return 0


def cmd_train_retrieval(args) -> int:
    catalog, actions, gctx, world = _load(args.data)
    train, _ = temporal_split(actions, world["split_time"])
    enc = EncoderConfig(num_layers=2, num_heads=4, d_model=64, max_seq_len=100, activation="gelu",
                        use_local_context=args.variant == "tr+ctx", train_origin=world["start_time"])
    cfg = RetrievalConfig(encoder=enc, item_trainable=args.variant != "ntr", seed=args.seed)
    model = TwoTowerModel(cfg, catalog, _vocab(catalog, world), args.version)
    data = [TrainingSequence(cid, tuple(a), gctx.get(cid)) for cid, a in sorted(train.items())]
    res = train_retrieval(model, data, catalog, epochs=args.epochs, lr=args.lr,
                          callback=lambda e, l: logger.info("epoch %d loss %.4f", e, l))
    model.save(_out(args.out))
    emb_path = _out(args.embeddings or Path(args.out).with_suffix(".rke"))
    export_item_embeddings(model, catalog).save(emb_path)
    _emit(args, {"version": args.version, "checkpoint": args.out, "embeddings": emb_path,
                 "epoch_losses": res.epoch_losses})
    return 0


def cmd_train_ranker(args) -> int:
    catalog, actions, gctx, world = _load(args.data)
    pages = read_pages(Path(args.data) / "pages.jsonl")
    exs = ranking_examples(requests_from_pages(pages, actions, end=world["split_time"]))
    enc = EncoderConfig(num_layers=2, num_heads=8, d_model=128, max_seq_len=80, activation="relu",
                        train_origin=world["start_time"])
    cfg = RankerConfig(encoder=enc, use_position_branch=not args.no_position_branch, seed=args.seed)
    model = RankerModel(cfg, catalog, _vocab(catalog, world), args.version)
    res = train_ranker(model, exs, catalog, epochs=args.epochs, lr=args.lr,
                       callback=lambda e, l: logger.info("epoch %d loss %.4f", e, l))
    model.save(_out(args.out))
    _emit(args, {"version": args.version, "checkpoint": args.out, "examples": len(exs),
                 "epoch_losses": res.epoch_losses})
    return 0


def cmd_build_index(args) -> int:
    emb = EmbeddingSet.load(args.embeddings)
    catalog = read_catalog(args.catalog) if args.catalog else None
    params = IndexParams(m=args.m, ef_construction=args.ef_construction, ef_search=args.ef_search)
    index = build_index(emb, args.mode, catalog, params)
    index.save(_out(args.out))
    _emit(args, {"model_version": index.model_version, "items": len(index), "mode": index.mode,
                 "prefix": args.out})
    return 0


def cmd_evaluate(args) -> int:
    names = [s.strip() for s in args.systems.split(",") if s.strip()]
    bad = [n for n in names if n not in SYSTEMS]
    if bad:
        print(f"unknown systems {bad}; choose from {','.join(SYSTEMS)}", file=sys.stderr)
        return 2
    ks = tuple(int(k) for k in args.k.split(","))
    catalog, actions, gctx, world = _load(args.data)
    pages = read_pages(Path(args.data) / "pages.jsonl")
    train, _ = temporal_split(actions, world["split_time"])
    requests = requests_from_pages(pages, actions, start=world["split_time"])
    if args.limit:
        requests = requests[:args.limit]
    needs_model = [n for n in names if n != "popularity"]
    bundle = None
    if needs_model:
        if not args.retrieval:
            print(f"systems {needs_model} need --retrieval", file=sys.stderr)
            return 2
        tower = TwoTowerModel.load(args.retrieval, catalog)
        emb = EmbeddingSet.load(args.embeddings) if args.embeddings else export_item_embeddings(tower, catalog)
        ranker = RankerModel.load(args.ranker) if args.ranker else None
        if ranker is None and any(n in ("ranker", "full") for n in names):
            print("systems ranker/full need --ranker", file=sys.stderr)
            return 2
        bundle = ModelBundle(tower, build_index(emb, "exact", catalog), ranker)
    systems = []
    for n in names:
        if n == "popularity":
            systems.append(PopularitySystem(catalog, train, world["split_time"]))
        elif n == "retrieval":
            systems.append(PipelineSystem(bundle, catalog, use_ranker=False, name=n))
        elif n == "ranker":
            systems.append(PipelineSystem(bundle, catalog, use_ranker=True, name=n))
        else:
            systems.append(PipelineSystem(bundle, catalog, use_ranker=True, policy=PolicyConfig(), name=n))
    reports = run_protocol(systems, requests, catalog, depth=args.depth, ks=ks,
                           query_category=world["query_category"])
    if args.report:
        write_report(args.report, reports)
    _emit(args, {"systems": [r.summary() for r in reports.values()]}, format_table(reports, ks))
    return 0


def cmd_serve(args) -> int:
    from .serving import Platform, PlatformConfig, serve
    platform = Platform.from_config(PlatformConfig.load(args.config))
    server = serve(platform, args.host, args.port)
    logger.info("serving %s on %s:%d", platform.model_version, args.host, args.port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_gradcheck(args) -> int:
    from .diagnostics import GRAD_TOLERANCE, gradcheck_report
    report = {k: float(v) for k, v in gradcheck_report(args.seed, args.points, args.entries).items()}
    worst = max(report.values())
    ok = worst < GRAD_TOLERANCE
    text = "\n".join(f"{k:<20} {v:.3e}" for k, v in report.items())
    text += f"\nmax relative error {worst:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRAD_TOLERANCE:g})"
    _emit(args, {"checks": report, "max_relative_error": worst, "ok": ok}, text)
    return 0 if ok else 1


def cmd_theorem_demo(args) -> int:
    from .diagnostics import theorem_table
    degrees = [int(d) for d in args.degrees.split(",")]
    rows = theorem_table(degrees, grid_points=args.grid)
    errors = [r["max_error"] for r in rows]
    ok = all(b <= a for a, b in zip(errors, errors[1:]))
    text = "degree  dim  max_error\n" + "\n".join(
        f"{r['degree']:>6} {r['embedding_size']:>4}  {r['max_error']:.3e}" for r in rows)
    _emit(args, {"rows": rows, "non_increasing": ok}, text)
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rankplat", description="Retrieve, rank and compose pages on synthetic fashion data.")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--customers", type=int, default=GeneratorConfig.num_customers)
    g.add_argument("--items", type=int, default=GeneratorConfig.num_items)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train-retrieval", help="train the two-tower candidate generator")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--embeddings")
    t.add_argument("--variant", choices=("ntr", "tr", "tr+ctx"), default="tr+ctx")
    t.add_argument("--epochs", type=int, default=3)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--version", default="v1")
    t.set_defaults(fn=cmd_train_retrieval)

    r = sub.add_parser("train-ranker", help="train the multi-task ranker on logged pages")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--epochs", type=int, default=2)
    r.add_argument("--lr", type=float, default=1e-3)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--version", default="v1")
    r.add_argument("--no-position-branch", action="store_true")
    r.set_defaults(fn=cmd_train_ranker)

    b = sub.add_parser("build-index", help="build a versioned item index from an embedding file")
    b.add_argument("--embeddings", required=True)
    b.add_argument("--catalog")
    b.add_argument("--out", required=True)
    b.add_argument("--mode", choices=("exact", "approximate"), default="exact")
    b.add_argument("--m", type=int, default=16)
    b.add_argument("--ef-construction", type=int, default=200)
    b.add_argument("--ef-search", type=int, default=64)
    b.set_defaults(fn=cmd_build_index)

    e = sub.add_parser("evaluate", help="re-rank logged test pages and report metrics")
    e.add_argument("--data", required=True)
    e.add_argument("--systems", default="popularity,full")
    e.add_argument("--k", default="6,84,500")
    e.add_argument("--retrieval")
    e.add_argument("--embeddings")
    e.add_argument("--ranker")
    e.add_argument("--depth", type=int, default=500)
    e.add_argument("--limit", type=int, default=0, help="evaluate only the first N requests")
    e.add_argument("--report", help="write per-system JSONL here")
    e.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("serve", help="run the HTTP ranking service")
    s.add_argument("--config", required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.set_defaults(fn=cmd_serve)

    c = sub.add_parser("gradcheck", help="finite-difference check of every primitive and both losses")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--points", type=int, default=10)
    c.add_argument("--entries", type=int, default=2, help="coordinates per parameter tensor at each point")
    c.set_defaults(fn=cmd_gradcheck)

    d = sub.add_parser("theorem-demo", help="polynomial two-tower fit error by degree")
    d.add_argument("--degrees", default="1,2,4,6")
    d.add_argument("--grid", type=int, default=41)
    d.set_defaults(fn=cmd_theorem_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"rankplat {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
