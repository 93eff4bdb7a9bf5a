"""Command line: generate | train | evaluate | ablate | count-params | gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import harness
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config, parse_value, save_config
from .datagen import CorpusSpec, generate_corpus, read_corpus, write_corpus
from .errors import DMPTError
from .retrieval import metrics_json

GRADCHECK_TOL = 1e-3


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    group = p.add_argument_group("config keys (override the file)")
    for f in fields(RunConfig):
        flags = {f"--{f.name}", f"--{f.name.replace('_', '-')}"}
        group.add_argument(*sorted(flags), dest=f"cfg_{f.name}", metavar=f.name.upper(), default=None)


def _config(args, base: dict | None = None) -> RunConfig:
    overrides = dict(base or {})
    for f in fields(RunConfig):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            overrides[f.name] = parse_value(f.name, raw)
    return load_config(args.config, overrides)


def _setup_logging(log_file: Path | None = None) -> None:
    logger = logging.getLogger("dmpt")
    logger.setLevel(logging.INFO)
    logger.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(handler)
    if log_file is not None:
        fh = logging.FileHandler(log_file, mode="w", encoding="utf-8")
        fh.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(fh)


def cmd_generate(args) -> int:
    kwargs = {}
    for f in fields(CorpusSpec):
        value = getattr(args, f.name)
        if value is not None:
            kwargs[f.name] = value
    corpus = generate_corpus(CorpusSpec(**kwargs))
    write_corpus(corpus, args.out)
    print(f"wrote {args.out}: {len(corpus.train)} train / {len(corpus.query)} query / {len(corpus.gallery)} gallery")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if not cfg.data:
        raise DMPTError("train needs a dataset: pass --data PATH (see `dmpt generate`)")
    corpus = read_corpus(cfg.data)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _setup_logging(out / "train.log")
    save_config(cfg, out / "config.txt")
    result = harness.train(cfg, corpus, resume=args.resume, checkpoint_dir=out)
    metrics = harness.evaluate_model(result.model, corpus, out)
    sys.stdout.write(metrics_json(metrics))
    return 0


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = args.data or ckpt.config.data
    corpus = read_corpus(data)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    model = harness.restore_model(ckpt)
    metrics = harness.evaluate_model(model, corpus, out)
    sys.stdout.write(metrics_json(metrics))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    _setup_logging()
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    rows = harness.ablate(cfg, args.grid, seeds)
    table = harness.ablation_csv(rows)
    if args.table:
        Path(args.table).write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def cmd_count_params(args) -> int:
    cfg = _config(args)
    counts = harness.count_params(cfg, args.num_ids)
    print(f"trainable={counts['trainable']} frozen={counts['frozen']} ratio={counts['ratio']:.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args, harness.MICRO)
    result = harness.gradcheck(cfg)
    name, idx = result.worst if result.worst else ("-", ())
    print(json.dumps({
        "max_rel_error": result.max_error,
        "worst": f"{name}{list(idx)}",
        "coordinates": result.checked,
        "max_abs_grad": result.max_abs_grad,
        "tolerance": args.tol,
    }, indent=2))
    return 0 if result.max_error < args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmpt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic DMPTDS1 corpus")
    p.add_argument("--out", required=True)
    for f in fields(CorpusSpec):
        kind = float if f.type == "float" else int
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train prompts on a corpus, then evaluate")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the query/gallery splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", help="directory for metrics.json and features.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train a grid of configurations over several seeds")
    _add_config_flags(p)
    p.add_argument("--grid", default="components", help="components | k=0,1,2 | S=0,8,32 | M=0,1,2,3")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--table", help="write the CSV table here as well as to stdout")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("count-params", help="trainable/frozen parameter counts")
    _add_config_flags(p)
    p.add_argument("--num-ids", type=int, default=16)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss on a micro config")
    _add_config_flags(p)
    p.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DMPTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
