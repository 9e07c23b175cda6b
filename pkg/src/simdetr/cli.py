"""Command-line entry point: gen, train, eval, diagnose, ablate.

Exit codes: 0 success, 1 usage or input error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Sequence

from . import diagnostics, metrics, trainer
from .model import ModelConfig
from .numcore import ParamStore
from .synthgen import CorpusFormatError, GenConfig, GenerationError, atomic_write_text, generate_corpus, load_corpus

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
U64_MAX = 2**64 - 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _u64(text: str) -> int:
    try:
        value = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError(f"seed out of u64 range: {text}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="simdetr", description="Synthetic temporal grounding with a Sim-DETR style detector.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--config", required=True, help="generator config JSON")
    p.add_argument("--out", required=True, help="output JSONL corpus")
    p.add_argument("--seed", type=_u64, help="override the config seed")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True, help="training corpus JSONL")
    p.add_argument("--val", required=True, help="validation corpus JSONL")
    p.add_argument("--model", required=True, help="model config JSON")
    p.add_argument("--train", required=True, help="training config JSON")
    p.add_argument("--out", required=True, help="output checkpoint JSON")
    p.add_argument("--log", required=True, help="output per-epoch CSV log")
    p.add_argument("--seed", type=_u64, help="override model and training seeds")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True, help="corpus JSONL")
    p.add_argument("--ckpt", required=True, help="checkpoint JSON")
    p.add_argument("--out", required=True, help="output metrics report JSON")

    p = sub.add_parser("diagnose", help="write query diagnostics CSVs")
    p.add_argument("--data", required=True, help="corpus JSONL")
    p.add_argument("--ckpt", required=True, help="checkpoint JSON")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("ablate", help="sweep query counts and decoder depths")
    p.add_argument("--data", required=True, help="training corpus JSONL")
    p.add_argument("--val", required=True, help="validation corpus JSONL")
    p.add_argument("--model", required=True, help="base model config JSON")
    p.add_argument("--train", required=True, help="training config JSON")
    p.add_argument("--queries", required=True, type=_int_list, help="comma-separated query counts")
    p.add_argument("--layers", required=True, type=_int_list, help="comma-separated decoder depths")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--seed", type=_u64, help="override model and training seeds")
    return parser


# -- input helpers: every failure here is a usage error ----------------------

def _require_file(path: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"no such file: {path}")
    return path


def _require_out_dir(path: str) -> str:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise UsageError(f"output directory does not exist: {parent}")
    return path


def _read_json(path: str) -> dict:
    _require_file(path)
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(obj, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return obj


def _config(cls, path: str, **overrides):
    obj = _read_json(path)
    obj.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls.from_dict(obj)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def _corpus(path: str, what: str) -> list:
    _require_file(path)
    try:
        corpus = load_corpus(path)
    except CorpusFormatError as exc:
        raise UsageError(str(exc)) from None
    if not corpus:
        raise UsageError(f"{what} corpus is empty: {path}")
    return corpus


def _checkpoint(path: str) -> tuple[ParamStore, ModelConfig]:
    obj = _read_json(path)
    if "model" not in obj:
        raise UsageError(f"{path}: checkpoint lacks the model config")
    try:
        return ParamStore.from_dict(obj), ModelConfig.from_dict(obj["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: invalid checkpoint: {exc}") from None


# -- subcommands -------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _config(GenConfig, args.config, seed=args.seed)
    _require_out_dir(args.out)
    summary = generate_corpus(cfg, args.out)
    print(f"wrote {summary.count} samples to {summary.path} "
          f"(mean {summary.mean_segments:.3f} segments per video)")
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg = _config(ModelConfig, args.model, seed=args.seed)
    train_cfg = _config(trainer.TrainConfig, args.train, seed=args.seed)
    train_set = _corpus(args.data, "training")
    val_set = _corpus(args.val, "validation")
    _require_out_dir(args.out)
    _require_out_dir(args.log)
    try:
        params, runlog = trainer.train(train_set, val_set, model_cfg, train_cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    atomic_write_text(args.out, params.to_json(model=model_cfg.to_dict()))
    atomic_write_text(args.log, runlog.to_csv())
    last = runlog.rows[-1]
    print(f"trained {train_cfg.epochs} epochs; final loss {last.total:.6f}; checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, cfg = _checkpoint(args.ckpt)
    corpus = _corpus(args.data, "evaluation")
    _require_out_dir(args.out)
    report = metrics.evaluate(corpus, params, cfg)
    atomic_write_text(args.out, report.to_json())
    print(f"map_avg {report.map_avg:.4f}  R1@0.5 {report.r1[0.5]:.4f}  R1@0.7 {report.r1[0.7]:.4f}  "
          f"mIoU {report.miou:.4f}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    params, cfg = _checkpoint(args.ckpt)
    corpus = _corpus(args.data, "diagnostics")
    if os.path.exists(args.out) and not os.path.isdir(args.out):
        raise UsageError(f"--out must be a directory: {args.out}")
    report = diagnostics.diagnose(corpus, params, cfg)
    for path in report.write(args.out):
        print(f"wrote {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    model_cfg = _config(ModelConfig, args.model, seed=args.seed)
    train_cfg = _config(trainer.TrainConfig, args.train, seed=args.seed)
    train_set = _corpus(args.data, "training")
    val_set = _corpus(args.val, "validation")
    _require_out_dir(args.out)
    try:
        rows = trainer.ablate(train_set, val_set, model_cfg, train_cfg, args.queries, args.layers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    atomic_write_text(args.out, trainer.ablation_csv(rows))
    print(f"wrote {len(rows)} cells to {args.out}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "diagnose": cmd_diagnose, "ablate": cmd_ablate}


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"simdetr {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (trainer.TrainingDiverged, GenerationError, OSError, FloatingPointError) as exc:
        print(f"simdetr {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
