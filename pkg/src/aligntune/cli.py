"""``aligntune`` command line: generate, train, eval, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from . import gradcheck as gc
from .config import PRESETS, ConfigError, load_config
from .data import CorpusConfig, CorpusFormatError, corpus_stats, generate_corpus, load_corpus, save_corpus
from .geometry import build_patch_grid, build_pooled_grid, match_tokens_to_cells
from .training import build_corpora, configs_from_dict, evaluate, read_checkpoint, train

log = logging.getLogger("aligntune")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--preset", choices=sorted(PRESETS), help="loss-weight preset")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, repeatable (e.g. losses.pita=0)")
    p.add_argument("--seed", type=int, help="seeds both corpus generation and training")


def _resolve_config(args) -> dict:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides = [f"corpus.seed={args.seed}", f"train.seed={args.seed}"] + overrides
    try:
        cfg = load_config(args.config, args.preset, overrides)
        configs_from_dict(cfg)  # validates every section up front
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from None
    except (ConfigError, TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    corpus_cfg, num_dev, _, _ = configs_from_dict(cfg)
    if args.num_docs is not None:
        if args.num_docs < 1:
            raise UsageError("--num-docs must be >= 1")
        corpus_cfg = CorpusConfig(**{**asdict(corpus_cfg), "num_docs": args.num_docs})
    docs = generate_corpus(corpus_cfg)
    save_corpus(docs, args.out)
    stats = corpus_stats(docs)
    stats["out"] = str(args.out)
    _emit(stats)
    return EXIT_OK


def _load_split(path: Optional[str]):
    if path is None:
        return None
    try:
        return load_corpus(path)
    except FileNotFoundError as exc:
        raise UsageError(f"corpus not found: {exc.filename or path}") from None


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    resume = None
    if args.resume is not None:
        resume = Path(args.resume) if args.resume else Path(args.out) / "last.pt"
        if not resume.is_file():
            raise UsageError(f"checkpoint not found: {resume}")
    train_docs = _load_split(args.train_corpus)
    dev_docs = _load_split(args.dev_corpus)
    if dev_docs is not None and train_docs is None:
        raise UsageError("--dev-corpus needs --train-corpus")
    summary = train(cfg, train_docs, dev_docs, out_dir=args.out, resume=resume)
    _emit(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    if args.corpus is not None:
        docs = _load_split(args.corpus)
    else:
        run_cfg = json.loads(read_checkpoint(ckpt)["run_config"])
        train_docs, dev_docs = build_corpora(run_cfg)
        docs = train_docs if args.split == "train" else dev_docs
    res = evaluate(ckpt, docs)
    if not args.per_class:
        res.pop("per_class_f1")
    res["num_docs"] = len(docs)
    res["split"] = args.corpus or args.split
    _emit(res)
    return EXIT_OK


def _dump_assignments(path: str, seed: int) -> None:
    docs = generate_corpus(CorpusConfig(num_docs=1, seed=seed))
    doc = docs[0]
    size = doc.image.shape[0]
    grid = build_patch_grid(size, 16)
    pooled = build_pooled_grid(grid, 1, 1)
    assign = match_tokens_to_cells(doc.boxes, pooled, size)
    Path(path).write_text(json.dumps({
        "doc_id": doc.doc_id,
        "boxes": [list(b) for b in doc.boxes],
        "token_to_cell": list(assign.token_to_cell),
        "cell_to_tokens": [list(t) for t in assign.cell_to_tokens],
        "unmatched": list(assign.unmatched_tokens),
    }, indent=2))


def cmd_gradcheck(args) -> int:
    names = args.loss or None
    seeds = [args.seed] if args.seed is not None else range(args.seeds)
    try:
        results = gc.run_gradcheck(names, seeds, args.tol)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    if args.seed is not None:
        for r in results:
            status = "PASS" if r.passed else "FAIL"
            print(f"{r.loss} seed={r.seed} max_rel_err={r.max_rel_err:.3e} {status}")
    else:
        for name, s in gc.summarize(results).items():
            status = "PASS" if not s["failed"] else f"FAIL ({s['failed']} cases)"
            print(f"{name}: {s['cases']} cases, max_rel_err={s['max_rel_err']:.3e} {status}")
    if args.dump_assignments:
        _dump_assignments(args.dump_assignments, args.seed or 0)
    failed = sorted({r.loss for r in results if not r.passed})
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aligntune", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus to disk")
    _config_args(p)
    p.add_argument("--num-docs", type=int, help="number of documents (default: train + dev)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model, writing checkpoints and metrics")
    _config_args(p)
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--resume", nargs="?", const="", default=None, metavar="CHECKPOINT",
                   help="resume from CHECKPOINT, or from OUT/last.pt when given bare")
    p.add_argument("--train-corpus", help="saved corpus directory to train on")
    p.add_argument("--dev-corpus", help="saved corpus directory to evaluate on")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint; prints metrics JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", help="saved corpus directory (default: regenerate the run's split)")
    p.add_argument("--split", choices=["train", "dev"], default="dev")
    p.add_argument("--per-class", action="store_true", help="include per-class F1")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    p.add_argument("--loss", action="append", choices=sorted(gc.CASES),
                   help="loss family to check, repeatable (default: all)")
    p.add_argument("--seed", type=int, help="check a single seeded case")
    p.add_argument("--seeds", type=int, default=20, help="number of random cases per family")
    p.add_argument("--tol", type=float, default=gc.DEFAULT_TOL)
    p.add_argument("--dump-assignments", metavar="PATH",
                   help="also write a sample token-to-patch assignment as JSON")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CorpusFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
