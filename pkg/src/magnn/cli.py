"""Command-line entry point: prepare -> train -> evaluate, plus gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Log verbosity comes from ``MAGNN_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .dataset import (
    DatasetError,
    FormatConfig,
    chronological_split,
    compare_reference,
    filter_and_index,
    load_dataset,
    parse_interactions,
    save_dataset,
    write_stats,
)
from .evaluator import evaluate
from .gradcheck import gradcheck
from .itemgraph import build_graph, export_triples
from .model import ModelConfig
from .trainer import TrainingDiverged, fit

log = logging.getLogger("magnn")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _overrides(args) -> list[tuple[str, str]]:
    pairs = []
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        pairs.append((k.strip(), v.strip()))
    if getattr(args, "seed", None) is not None:
        pairs.append(("seed", str(args.seed)))
    if getattr(args, "variant", None):
        pairs.append(("model.variant", args.variant))
    if getattr(args, "split", None):
        pairs.append(("eval.split", args.split))
    if getattr(args, "k", None) is not None:
        pairs.append(("eval.k", str(args.k)))
    return pairs


def _resolve(args) -> RunConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    return load_config(args.config, _overrides(args))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_prepare(args) -> int:
    cfg = _resolve(args)
    raw = Path(args.raw)
    if not raw.is_file():
        raise UsageError(f"input file not found: {raw}")
    ds = cfg.dataset
    fmt = FormatConfig(
        user_col=ds.user_col,
        item_col=ds.item_col,
        rating_col=None if ds.binary else ds.rating_col,
        time_col=ds.time_col,
        delimiter=ds.delimiter,
        max_malformed=ds.max_malformed,
    )
    rows = parse_interactions(raw, fmt)
    filtered = filter_and_index(rows, ds.rating_threshold, ds.min_count, binary=ds.binary)
    split = chronological_split(filtered)
    out = _out_dir(args)
    save_dataset(split, out / "dataset.magnnds")
    extra = {"filter_counts": filtered.counts}
    if ds.reference:
        extra["reference_check"] = compare_reference(split.stats(), ds.reference)
    stats = write_stats(split, out / "stats.json", extra)
    (out / "config.resolved").write_text(cfg.dumps(), encoding="utf-8")
    if args.export_graph:
        graph = build_graph(split.train, split.num_items, cfg.graph.lookahead, cfg.graph.symmetric)
        with open(out / "graph.tsv", "w", encoding="utf-8") as fh:
            export_triples(graph, fh)
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    if not Path(args.dataset).is_file():
        raise UsageError(f"dataset file not found: {args.dataset}")
    split = load_dataset(args.dataset)
    out = _out_dir(args)
    (out / "config.resolved").write_text(cfg.dumps(), encoding="utf-8")
    graph = build_graph(split.train, split.num_items, cfg.graph.lookahead, cfg.graph.symmetric)
    result = fit(split, graph, cfg.model, cfg.train, log_path=out / "train_log.jsonl")
    save_checkpoint(
        result.params,
        cfg.model,
        out / "checkpoint.magnnck",
        extra={"graph": {"lookahead": cfg.graph.lookahead, "symmetric": cfg.graph.symmetric},
               "best_epoch": result.best_epoch},
    )
    print(json.dumps({"best_epoch": result.best_epoch, "epochs_run": len(result.log),
                      "best_val_recall10": result.best_recall if result.log else None}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    for p in (args.checkpoint, args.dataset):
        if not Path(p).is_file():
            raise UsageError(f"file not found: {p}")
    header = read_header(args.checkpoint)
    expected = None
    if args.config is not None or args.set:
        cfg = _resolve(args)
        expected = cfg.model
        split_name, k = cfg.eval.split, cfg.eval.k
    else:
        split_name = args.split or "test"
        k = args.k if args.k is not None else 10
    try:
        params, model_cfg = load_checkpoint(args.checkpoint, expected)
    except CheckpointError as exc:
        if expected is not None and "does not match" in str(exc):
            raise UsageError(str(exc)) from exc
        raise
    split = load_dataset(args.dataset)
    if (split.num_users, split.num_items) != (params.num_users, params.num_items):
        raise UsageError("checkpoint and dataset disagree on user/item counts")
    graph_cfg = header.get("extra", {}).get("graph", {})
    graph = build_graph(split.train, split.num_items, graph_cfg.get("lookahead", 3),
                        graph_cfg.get("symmetric", False))
    with ad.precision(model_cfg.precision):
        report = evaluate(params, split, graph, model_cfg, mode=split_name, k=k,
                          checkpoint=str(args.checkpoint))
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    if args.per_user_csv:
        report.write_csv(args.per_user_csv)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck(seed=args.seed if args.seed is not None else 0, corrupt=args.inject_fault)
    for line in report.lines():
        print(line)
    print(f"{'PASS' if report.passed else 'FAIL'} ({report.seconds:.1f}s)")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("prepare", help="parse, filter and split raw interactions")
    p.add_argument("raw")
    p.add_argument("--out", required=True)
    p.add_argument("--export-graph", action="store_true", help="also write graph.tsv triples")
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fit a model on a prepared dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=["MF", "MF+S", "MF+S+H+gating", "MF+S+H+concat", "FULL"])
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Top-K evaluation of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", choices=["val", "test"])
    p.add_argument("--k", type=int)
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--per-user-csv", help="write user,recall,ndcg rows here")
    common(p, seed=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int)
    p.add_argument("--inject-fault", metavar="TENSOR", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("MAGNN_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"magnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"magnn: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
