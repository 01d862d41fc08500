"""Command line entry point.

Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import asdict

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .encoder import embed_corpus, load_checkpoint, save_checkpoint
from .evaluation import evaluate, read_qrels, read_visual_map, rrf_combine
from .formula_ir import ParseError, opt_to_opg, parse_opt_sexpr, read_corpus_tsv
from .retrieval import SearchConfig, VectorIndex, batch_search_vectors, read_run, write_run
from .semantic import embed_text_fallback, extract_context, import_vectors, read_vectors, write_vectors
from .store import StoreEntry, read_store, write_store
from .training import train

log = logging.getLogger("formularank")

MAX_FAILURE_RATE = 0.01


class DataError(Exception):
    pass


def _config(args) -> RunConfig:
    text = None
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    return load_config(text, args.set or [], args.profile)


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def cmd_ingest(args, cfg: RunConfig) -> int:
    with open(args.corpus, encoding="utf-8") as fh:
        records = list(read_corpus_tsv(fh))
    if not records:
        raise DataError(f"{args.corpus}: no formulas")
    entries, failed = [], 0
    seen: set[str] = set()
    for rec in records:
        if rec.formula_id in seen:
            raise DataError(f"duplicate formula id {rec.formula_id}")
        seen.add(rec.formula_id)
        try:
            g = opt_to_opg(parse_opt_sexpr(rec.source_text))
        except ParseError as exc:
            log.warning("formula %s: %s", rec.formula_id, exc)
            failed += 1
            continue
        ctx = extract_context(rec.context, None, rec.formula_id, cfg.semantic.max_length, cfg.semantic.unit)
        rec = type(rec)(rec.formula_id, rec.post_id, rec.source_text, ctx.text)
        entries.append(StoreEntry(rec, g, g.node_count >= cfg.train.min_nodes))
    rate = failed / len(records)
    trainable = sum(e.train for e in entries)
    log.info("ingested %d formulas, %d failed, %d trainable", len(entries), failed, trainable)
    if rate > MAX_FAILURE_RATE:
        raise DataError(f"{failed}/{len(records)} formulas failed to parse")
    write_store(args.out, entries)
    print(json.dumps({"ingested": len(entries), "failed": failed, "trainable": trainable}))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    if args.dry_run:
        plan = {"profile": cfg.run.profile, "train": asdict(cfg.train_config()),
                "augment": asdict(cfg.augment_config()), "search": asdict(cfg.search_config())}
        print(json.dumps(plan, indent=2, sort_keys=True))
        return 0
    if not args.store or not args.out:
        raise DataError("train needs a store and --out unless --dry-run is given")
    entries = read_store(args.store)
    graphs = [e.graph for e in entries if e.train]
    result = train(graphs, cfg.augment_config(), cfg.train_config(), checkpoint_path=args.out, log_path=args.log)
    if not result.history:
        save_checkpoint(result.params, args.out)
    last = result.history[-1] if result.history else None
    log.info("trained on %d graphs; final loss %s", len(graphs), last and round(last.mean_loss, 4))
    return 0


def _semantic_vectors(source: str, records, cfg: RunConfig) -> tuple[list[str], np.ndarray]:
    ids = [r.formula_id for r in records]
    if source == "fallback":
        return ids, np.array([embed_text_fallback(r.context, cfg.semantic.dim).v for r in records]).reshape(
            len(records), cfg.semantic.dim)
    if source.startswith("import:"):
        vectors = import_vectors(source[len("import:"):])
        dim = next(iter(vectors.values())).v.shape[0] if vectors else cfg.semantic.dim
        T = np.zeros((len(ids), dim))
        for i, fid in enumerate(ids):
            if fid in vectors:
                T[i] = vectors[fid].v
        return ids, T
    raise DataError(f"--semantic must be 'fallback' or 'import:<file>', got {source!r}")


def cmd_embed(args, cfg: RunConfig) -> int:
    entries = read_store(args.store)
    params = load_checkpoint(args.checkpoint)
    S = embed_corpus([e.graph for e in entries], params)
    write_vectors(args.out, [e.record.formula_id for e in entries], S)
    if args.semantic_out:
        source = args.semantic or ("fallback" if cfg.semantic.provider == "fallback" else None)
        if source is None:
            raise DataError("semantic provider 'import' needs --semantic import:<file>")
        ids, T = _semantic_vectors(source, [e.record for e in entries], cfg)
        write_vectors(args.semantic_out, ids, T)
    log.info("embedded %d formulas", len(entries))
    return 0


def cmd_search(args, cfg: RunConfig) -> int:
    entries = read_store(args.store)
    post_of = {e.record.formula_id: e.record.post_id for e in entries}
    ids, S = read_vectors(args.struct)
    T = None
    if args.sem:
        sem_ids, sem = read_vectors(args.sem)
        pos = {fid: i for i, fid in enumerate(sem_ids)}
        T = np.zeros((len(ids), sem.shape[1]))
        for i, fid in enumerate(ids):
            if fid in pos:
                T[i] = sem[pos[fid]]
    index = VectorIndex(ids, S, T, [post_of.get(fid, "") for fid in ids])
    params = load_checkpoint(args.checkpoint)
    with open(args.topics, encoding="utf-8") as fh:
        topics = list(read_corpus_tsv(fh))
    topic_vectors = import_vectors(args.topic_vectors) if args.topic_vectors else None

    queries, errors = [], {}
    for t in topics:
        try:
            g = opt_to_opg(parse_opt_sexpr(t.source_text))
        except ParseError as exc:
            log.error("topic %s: %s", t.formula_id, exc)
            errors[t.formula_id] = str(exc)
            continue
        q_struct = embed_corpus([g], params)[0]
        q_sem = None
        if T is not None:
            if topic_vectors is not None:
                sv = topic_vectors.get(t.formula_id)
                q_sem = sv.v if sv is not None else None
            else:
                ctx = extract_context(t.context, None, t.formula_id, cfg.semantic.max_length, cfg.semantic.unit)
                q_sem = embed_text_fallback(ctx.text, T.shape[1]).v
        queries.append((t.formula_id, q_struct, q_sem))
    s = cfg.search
    search_cfg = SearchConfig(s.lam, max(s.stage1_k, s.final_n), s.final_n)
    rows, failed = batch_search_vectors(queries, index, search_cfg, cfg.run.run_tag)
    errors.update(failed)
    write_run(args.out, rows)
    log.info("searched %d topics, %d failed", len(topics), len(errors))
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    run = read_run(args.run)
    report = evaluate(run, read_qrels(args.qrels), read_visual_map(args.vmap) if args.vmap else {})
    if args.json:
        with open(args.json, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report.to_json())
    sys.stdout.write(report.to_json() if args.format == "json" else report.table())
    return 0


def cmd_fuse(args, cfg: RunConfig) -> int:
    runs = [read_run(p) for p in args.runs]
    k_rrf = cfg.eval.k_rrf if args.k_rrf is None else args.k_rrf
    depth = cfg.eval.depth if args.depth is None else args.depth
    write_run(args.out, rrf_combine(runs, k_rrf, depth, args.tag))
    return 0


def cmd_config(args, cfg: RunConfig) -> int:
    sys.stdout.write(cfg.to_ini())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run-config file")
    common.add_argument("--profile", choices=["desk", "full"], help="base profile (default: from file, else desk)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--threads", type=int, help="BLAS thread count (1 = deterministic reference mode)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="formularank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="parse a corpus TSV into a store")
    p.add_argument("corpus")
    p.add_argument("out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common], help="train the structural encoder")
    p.add_argument("store", nargs="?")
    p.add_argument("--out", help="checkpoint path (rewritten every epoch)")
    p.add_argument("--log", help="JSON-lines training log")
    p.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common], help="write structural (and semantic) vectors")
    p.add_argument("store")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True, help="structural vector file")
    p.add_argument("--semantic", help="fallback | import:<file>")
    p.add_argument("--semantic-out", help="semantic vector file")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("search", parents=[common], help="run topics against the index")
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--struct", required=True, help="structural vector file")
    p.add_argument("--sem", help="semantic vector file")
    p.add_argument("--topics", required=True, help="topics TSV (same columns as the corpus)")
    p.add_argument("--topic-vectors", help="imported semantic vectors for the topics")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", parents=[common], help="P'@5, P'@10, nDCG'@10 of a run")
    p.add_argument("run")
    p.add_argument("qrels")
    p.add_argument("vmap", nargs="?")
    p.add_argument("--json", help="also write the JSON report here")
    p.add_argument("--format", choices=["table", "json"], default="table")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fuse", parents=[common], help="reciprocal rank fusion of runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--k-rrf", type=float)
    p.add_argument("--depth", type=int)
    p.add_argument("--tag", default="rrf")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("config", parents=[common], help="validate and print the resolved config")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command == "fuse" and len(args.runs) < 2:
        parser.error("fuse needs at least two runs")
    try:
        cfg = _config(args)
    except (ValueError, OSError) as exc:
        log.error("config: %s", exc)
        return 2
    threads = args.threads or cfg.run.threads
    try:
        with _thread_limit(threads):
            return args.func(args, cfg)
    except (DataError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
