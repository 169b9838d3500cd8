"""Command line entry point: train, eval, predict, gen-synthetic, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence

import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, load_squad_style
from .layers import VARIANTS
from .synthetic import SyntheticConfig, generate_synthetic, write_corpus
from .training import PRESETS, TrainConfig, TrainingDiverged, evaluate, predict, train

EXIT_USAGE = 2

# flag name -> TrainConfig field
TRAIN_FLAGS = {
    "epochs": int, "batch_size": int, "learning_rate": float, "max_seq_len": int, "seed": int,
    "stride": int, "d": int, "heads": int, "total_layers": int, "decoupling_layers": int,
    "dropout": float, "initializer_range": float, "warmup_fraction": float, "weight_decay": float,
    "position_init": str,
}


class UsageError(Exception):
    pass


def _json_log(event: str, **payload) -> None:
    print(json.dumps({"event": event, **payload}, sort_keys=True), flush=True)


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with TrainConfig fields")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    for name, typ in TRAIN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    p.add_argument("--no-answerability", action="store_true", help="disable the answerability head")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = deterministic)")


def _train_config(args, variant: Optional[str] = None) -> TrainConfig:
    base = asdict(PRESETS[args.preset]) if args.preset else asdict(TrainConfig())
    if args.config:
        try:
            base.update(json.loads(args.config.read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    for name in TRAIN_FLAGS:
        value = getattr(args, name)
        if value is not None:
            base[name] = value
    if args.no_answerability:
        base["answerability_enabled"] = False
    try:
        config = TrainConfig.from_dict(base)
        return config.with_variant(variant) if variant else config
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load_corpus(path: Path):
    if not path.exists():
        raise UsageError(f"no such data file: {path}")
    return load_squad_style(path)


def _load_model(path: Optional[Path]):
    if path is None or not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_gen_synthetic(args) -> int:
    overrides = json.loads(args.config.read_text(encoding="utf-8")) if args.config else {}
    known = {f.name for f in fields(SyntheticConfig)}
    for key in ("num_questions", "unanswerable_fraction", "max_speakers", "max_utterances", "id_prefix"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    unknown = set(overrides) - known
    if unknown:
        raise UsageError(f"unknown synthetic config keys: {sorted(unknown)}")
    if "question_mix" in overrides:
        overrides["question_mix"] = tuple(overrides["question_mix"])
    config = SyntheticConfig(**overrides)
    try:
        corpus = generate_synthetic(config, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_corpus(corpus, args.out, config)
    _json_log("gen-synthetic", out=str(args.out), questions=len(corpus), seed=args.seed)
    return 0


def cmd_train(args) -> int:
    config = _train_config(args, args.variant)
    corpus = _load_corpus(args.train)
    result = train(corpus, config, args.log)
    save_checkpoint(args.out, result.model, result.vocab, extra={"train_config": asdict(config)})
    _json_log("train", checkpoint=str(args.out), epochs=config.epochs, final=result.epochs[-1])
    return 0


def cmd_eval(args) -> int:
    model, vocab, header = _load_model(args.checkpoint)
    corpus = _load_corpus(args.data)
    report = evaluate(model, vocab, corpus)
    payload = report.to_dict(with_predictions=args.with_predictions)
    if args.out:
        args.out.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _json_log("eval", EM=report.EM, F1=report.F1, count=report.count,
              speaker_accuracy=report.speaker_accuracy, key_utterance_accuracy=report.key_utterance_accuracy)
    return 0


def cmd_predict(args) -> int:
    model, vocab, _ = _load_model(args.checkpoint)
    predictions, _ = predict(model, vocab, _load_corpus(args.data))
    answers = {qid: p["answer_text"] for qid, p in predictions.items()}
    args.out.write_text(json.dumps(answers, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _json_log("predict", out=str(args.out), questions=len(answers))
    return 0


def cmd_ablate(args) -> int:
    config = _train_config(args, args.variant)
    train_corpus, test_corpus = _load_corpus(args.train), _load_corpus(args.test)
    result = train(train_corpus, config, args.log)
    report = evaluate(result.model, result.vocab, test_corpus, config.max_seq_len, config.stride,
                      config.max_answer_len)
    payload = {"variant": args.variant, **report.to_dict()}
    if args.out:
        args.out.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _json_log("ablate", variant=args.variant, EM=report.EM, F1=report.F1,
              speaker_accuracy=report.speaker_accuracy, key_utterance_accuracy=report.key_utterance_accuracy)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dialdecouple", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic dialogue QA corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, help="JSON file with generator fields")
    p.add_argument("--num-questions", dest="num_questions", type=int)
    p.add_argument("--unanswerable-fraction", dest="unanswerable_fraction", type=float)
    p.add_argument("--max-speakers", dest="max_speakers", type=int)
    p.add_argument("--max-utterances", dest="max_utterances", type=int)
    p.add_argument("--id-prefix", dest="id_prefix")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--log", type=Path, help="JSON-lines epoch log")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a labelled corpus")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, help="write the full report as JSON")
    p.add_argument("--with-predictions", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write {question id: answer text}")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train and evaluate one variant")
    p.add_argument("--variant", choices=VARIANTS, required=True)
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--log", type=Path)
    _add_train_options(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None):
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DataError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
