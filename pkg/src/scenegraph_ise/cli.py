"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, malformed input,
oracle failure), 2 internal failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis
from .datagen import PROFILES, format_stats, generate_dataset, load_vocab, profile_config, tokenize
from .decoding import MAX_STEPS, decode_many
from .graph import GraphError, SceneGraph, Triple, TripleFormatError, canonical_serialize, read_triples, to_dot
from .metrics import copy_graph_baseline
from .model import ModelConfig
from .nn import CheckpointError
from .oracle import apply_actions, derive_actions, roundtrip_check
from .training import OracleFailure, TrainConfig, evaluate_model, load_model, train

log = logging.getLogger("scenegraph_ise")

VALIDATION_ERRORS = (TripleFormatError, GraphError, CheckpointError, OracleFailure, FileNotFoundError, IsADirectoryError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for every random choice (default 0)")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker processes for decoding (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="progress logging on stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="scenegraph-ise", description="Scene graph modification by incremental expansion.", parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("datagen", parents=[common], help="generate a synthetic triple dataset")
    p.add_argument("--profile", choices=sorted(PROFILES), default="mscoco", help="size preset")
    p.add_argument("--train", type=int, help="training triples (default from profile)")
    p.add_argument("--dev", type=int, help="development triples")
    p.add_argument("--test", type=int, help="test triples")
    p.add_argument("--vocab", type=Path, help="vocabulary config file (default: packaged vocabulary)")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("oracle-check", parents=[common], help="verify oracle round-trips on a triple file")
    p.add_argument("triples", type=Path)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", type=Path, required=True, help="directory with train/dev[/test].jsonl")
    p.add_argument("--out", type=Path, required=True, help="output directory for checkpoint and log")
    p.add_argument("--preset", choices=("desk", "full"), default="desk", help="model size")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--epochs", type=int, default=100, help="maximum epochs")
    p.add_argument("--patience", type=int, default=5, help="evaluations without dev improvement before stopping")
    p.add_argument("--warmup", type=int, default=2000, help="learning-rate warmup steps")
    p.add_argument("--lr-scale", type=float, default=1.0, help="multiplier on the warmup schedule")
    p.add_argument("--eval-interval", type=int, default=1, help="epochs between dev evaluations")
    p.add_argument("--time-budget", type=float, help="stop after this many seconds")
    p.add_argument(
        "--train-fraction", type=float, nargs="+", default=[1.0],
        help="fraction(s) of the training file; several values run the size sweep",
    )

    p = sub.add_parser("decode", parents=[common], help="decode with a trained model")
    p.add_argument("--model", type=Path, required=True, help="checkpoint file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--triples", type=Path, help="triple file; the source and query of each line are used")
    src.add_argument("--source", help="source graph as JSON or a path to a JSON file")
    p.add_argument("--query", help="query text (with --source)")
    p.add_argument("--out", type=Path, help="write predicted graphs as JSON lines here (default stdout)")
    p.add_argument("--dot", type=Path, help="write the DOT rendering of each extended graph into this directory")
    p.add_argument("--max-steps", type=int, default=MAX_STEPS)

    p = sub.add_parser("eval", parents=[common], help="score a model on a triple file")
    p.add_argument("--model", type=Path, help="checkpoint file (omit with --baseline only)")
    p.add_argument("--triples", type=Path, required=True)
    p.add_argument("--baseline", action="store_true", help="also score the copy-the-source baseline")
    p.add_argument("--max-steps", type=int, default=MAX_STEPS)

    p = sub.add_parser("export-dot", parents=[common], help="render triples as DOT")
    p.add_argument("triples", type=Path)
    p.add_argument("--line", type=int, default=1, help="1-based line of the triple")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def _opt(args, name: str, default):
    return getattr(args, name, default)


def cmd_datagen(args) -> int:
    overrides = {k: getattr(args, k) for k in ("train", "dev", "test") if getattr(args, k) is not None}
    for k, v in overrides.items():
        if v < 0:
            raise UsageError(f"--{k} must be non-negative")
    cfg = profile_config(args.profile, seed=_opt(args, "seed", 0), **overrides)
    vocab = load_vocab(args.vocab)
    stats = generate_dataset(cfg, vocab, args.out)
    print(format_stats(stats))
    return 0


def cmd_oracle_check(args) -> int:
    triples = read_triples(args.triples)
    first_bad = None
    ok = 0
    for line, t in enumerate(triples, start=1):
        if roundtrip_check(t.source, t.target):
            ok += 1
        elif first_bad is None:
            first_bad = line
    print(f"{ok}/{len(triples)} round-trips ok")
    if first_bad is not None:
        print(f"first failure: line {first_bad}")
        return 1
    return 0


def _train_config(args, fraction: float) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size, max_epochs=args.epochs, patience=args.patience, seed=_opt(args, "seed", 0),
        warmup_steps=args.warmup, eval_interval=args.eval_interval, lr_scale=args.lr_scale,
        train_fraction=fraction, time_budget=args.time_budget, threads=_opt(args, "threads", 1),
    )


def cmd_train(args) -> int:
    fractions = args.train_fraction
    configs = [_train_config(args, f) for f in fractions]
    model_cfg = (lambda: ModelConfig.desk()) if args.preset == "desk" else (lambda: ModelConfig())
    if len(fractions) == 1:
        result = train(configs[0], model_cfg(), args.data, args.out)
        print(json.dumps({"checkpoint": str(result.checkpoint), **result.best}, sort_keys=True))
        return 0
    test_path = args.data / "test.jsonl"
    held = read_triples(test_path if test_path.exists() else args.data / "dev.jsonl")
    rows = []
    for cfg in configs:
        out = args.out / f"frac{round(100 * cfg.train_fraction):03d}"
        result = train(cfg, model_cfg(), args.data, out)
        report = evaluate_model(result.model, held, threads=cfg.threads)
        rows.append((cfg.train_fraction, report))
        print(json.dumps({"train_fraction": cfg.train_fraction, "checkpoint": str(result.checkpoint), **report.as_dict()}, sort_keys=True))
    print(analysis.format_sweep_table(rows))
    return 0


def _read_graph(text: str) -> SceneGraph:
    path = Path(text)
    raw = path.read_text(encoding="utf-8") if not text.lstrip().startswith("{") and path.exists() else text
    try:
        return SceneGraph.from_json(json.loads(raw))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"--source: not a graph object ({exc})") from None


def cmd_decode(args) -> int:
    model, _ = load_model(args.model)
    if args.triples is not None:
        items = [(t.source, t.query) for t in read_triples(args.triples)]
    else:
        if not args.query:
            raise UsageError("--source needs --query")
        query = tokenize(args.query)
        if not query:
            raise UsageError("--query has no tokens")
        items = [(_read_graph(args.source), query)]
    results = decode_many(model, items, args.max_steps, _opt(args, "threads", 1))
    lines = []
    for r in results:
        lines.append(json.dumps({
            "graph": r.graph.to_json(),
            "canonical": canonical_serialize(r.graph),
            "actions": [str(a) for a in r.actions],
        }, sort_keys=True))
    text = "\n".join(lines) + "\n"
    if args.out is not None:
        args.out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.dot is not None:
        args.dot.mkdir(parents=True, exist_ok=True)
        for i, r in enumerate(results, start=1):
            (args.dot / f"pred_{i:05d}.dot").write_text(to_dot(r.extended, f"pred_{i}"), encoding="utf-8")
    return 0


def cmd_eval(args) -> int:
    triples = read_triples(args.triples)
    if args.model is None and not args.baseline:
        raise UsageError("eval needs --model, --baseline or both")
    blocks = []
    summary = {}
    if args.baseline:
        base = copy_graph_baseline(triples)
        blocks.append(analysis.format_report(base, "CopyGraph"))
        summary["copygraph"] = base.as_dict()
    if args.model is not None:
        model, _ = load_model(args.model)
        report = evaluate_model(model, triples, args.max_steps, _opt(args, "threads", 1))
        blocks.append(analysis.format_report(report, "ISE"))
        blocks.append(analysis.format_bucket_table("Query Length", analysis.query_length_table(report.records)))
        blocks.append(analysis.format_bucket_table("Graph Size", analysis.graph_size_table(report.records)))
        summary["model"] = report.as_dict()
    print("\n\n".join(blocks))
    print("METRICS " + json.dumps(summary, sort_keys=True))
    return 0


def cmd_export_dot(args) -> int:
    triples = read_triples(args.triples)
    if not 1 <= args.line <= len(triples):
        raise UsageError(f"--line must be in 1..{len(triples)}")
    t: Triple = triples[args.line - 1]
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "source.dot").write_text(to_dot(t.source, "source"), encoding="utf-8")
    (args.out / "target.dot").write_text(to_dot(t.target, "target"), encoding="utf-8")
    ext = apply_actions(t.source, derive_actions(t.source, t.target))
    (args.out / "extended.dot").write_text(to_dot(ext, "extended"), encoding="utf-8")
    print(f"wrote source.dot, target.dot, extended.dot to {args.out}")
    return 0


COMMANDS = {
    "datagen": cmd_datagen,
    "oracle-check": cmd_oracle_check,
    "train": cmd_train,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "export-dot": cmd_export_dot,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("scenegraph-ise: a command is required", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if _opt(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
    )
    if _opt(args, "threads", 1) < 1:
        print("scenegraph-ise: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"scenegraph-ise {args.command}: {exc}", file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        print(f"scenegraph-ise {args.command}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:  # bad option values caught in config validation
        print(f"scenegraph-ise {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"scenegraph-ise {args.command}: internal error: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
