"""Operator command line: prepare, train, caption, evaluate, export-attention.

Logs are line-oriented JSON on stdout (``--pretty`` switches to a human
format). Exit codes: 0 success, 2 input error, 3 numerical failure.
The REFCAP_SEED environment variable overrides the built-in default
seed; an explicit ``--seed`` flag overrides both.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from refcap.data import (
    CaptionManifest, DataError, load_features, load_prepared, prepare_dataset,
    write_prepared,
)
from refcap.inference import beam_search, evaluate_split, greedy_decode
from refcap.model import VARIANTS, CaptionModel, ModelConfig
from refcap.training import Checkpoint, NonFiniteLossError, TrainConfig, train

DEFAULT_SEED = 1234


def _default_seed() -> int:
    return int(os.environ.get("REFCAP_SEED", DEFAULT_SEED))


def _emit(args, obj: dict) -> None:
    if getattr(args, "pretty", False):
        event = obj.get("event", "")
        rest = " ".join(f"{k}={v}" for k, v in obj.items() if k != "event")
        print(f"[{event}] {rest}" if event else rest)
    else:
        print(json.dumps(obj))
    sys.stdout.flush()


def cmd_prepare(args) -> int:
    manifest = CaptionManifest.load(args.manifest)
    features = load_features(args.features)
    dataset = prepare_dataset(manifest, features, min_count=args.min_count,
                              max_len=args.max_len)
    dataset.validate()
    write_prepared(dataset, args.out, args.features)
    counts = {s: len(dataset.split_images(s)) for s in ("train", "val", "test")}
    _emit(args, {"event": "prepared", "vocab_size": len(dataset.vocab),
                 "max_len": dataset.max_len, "counts": counts,
                 "out": str(args.out)})
    return 0


def cmd_train(args) -> int:
    dataset = load_prepared(args.data)
    store = dataset.features
    config = ModelConfig.for_variant(
        args.variant, vocab_size=len(dataset.vocab),
        feature_dim=store.feature_dim, global_dim=store.global_dim,
        embed_dim=args.embed_dim, hidden_dim=args.hidden_dim,
        attention_dim=args.attention_dim, reflect_dim=args.reflect_dim,
        heads=args.heads, refiner_layers=args.refiner_layers,
        dropout=args.dropout, max_len=dataset.max_len)
    model = CaptionModel(config, seed=args.seed)
    train_config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.lr, dropout=args.dropout, patience=args.patience,
        weight_decay=args.weight_decay,
        clip_norm=None if args.clip_norm <= 0 else args.clip_norm,
        seed=args.seed, val_split=args.val_split)
    _emit(args, {"event": "config", "variant": args.variant,
                 "model": config.to_json()})
    result = train(model, dataset, train_config,
                   log_fn=lambda rec: _emit(args, {"event": "epoch", **rec}))
    result.checkpoint.save(args.out)
    _emit(args, {"event": "done", "best_epoch": result.checkpoint.epoch,
                 "best_val_bleu4": result.checkpoint.best_val_bleu,
                 "stopped_epoch": result.stopped_epoch,
                 "seconds": round(result.train_seconds, 2),
                 "checkpoint": str(args.out)})
    return 0


def _load_model(path) -> tuple[Checkpoint, CaptionModel]:
    checkpoint = Checkpoint.load(path)
    return checkpoint, checkpoint.build_model()


def _vocab_for(checkpoint: Checkpoint, dataset) -> None:
    if checkpoint.vocab_hash and dataset.vocab.content_hash() != checkpoint.vocab_hash:
        raise DataError("checkpoint was trained with a different vocabulary "
                        f"(hash {checkpoint.vocab_hash})")


def _decode_vocab(checkpoint: Checkpoint, vocab_path):
    from refcap.data import Vocabulary
    if vocab_path:
        return Vocabulary.load(vocab_path)
    if checkpoint.vocab is None:
        raise DataError("checkpoint has no embedded vocabulary; pass --vocab")
    return checkpoint.vocab


def cmd_caption(args) -> int:
    checkpoint, model = _load_model(args.checkpoint)
    vocab = _decode_vocab(checkpoint, args.vocab)
    store = load_features(args.features)
    record = store[args.id]
    results = beam_search(model, vocab, record, beam_size=args.beam_size,
                          max_len=args.max_len)
    best = results[0]
    _emit(args, best.to_json(args.id))
    if args.trace:
        with open(args.trace, "w") as fh:
            json.dump(best.trace.to_json(args.id, best.tokens), fh)
    return 0


def cmd_evaluate(args) -> int:
    checkpoint, model = _load_model(args.checkpoint)
    dataset = load_prepared(args.data)
    _vocab_for(checkpoint, dataset)
    override = None
    if args.echo_references:
        override = {im.image_id: im.ref_tokens[0]
                    for im in dataset.split_images(args.split)}
    _emit(args, {"event": "note", "metric": "METEOR",
                 "detail": "simplified variant: exact-match alignment, "
                           "no synonym resources"})
    try:
        report = evaluate_split(model, dataset, args.split,
                                beam_size=args.beam_size, max_len=args.max_len,
                                candidate_override=override)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(json.dumps(report))
    return 0


def cmd_export_attention(args) -> int:
    checkpoint, model = _load_model(args.checkpoint)
    vocab = _decode_vocab(checkpoint, args.vocab)
    store = load_features(args.features)
    record = store[args.id]
    if args.beam_size == 1:
        result = greedy_decode(model, vocab, record, max_len=args.max_len)
    else:
        result = beam_search(model, vocab, record, beam_size=args.beam_size,
                             max_len=args.max_len)[0]
    with open(args.out, "w") as fh:
        json.dump(result.trace.to_json(args.id, result.tokens), fh)
    _emit(args, {"event": "exported", "image_id": args.id,
                 "tokens": result.tokens, "out": str(args.out)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refcap",
        description="Train and run the refining/reflective captioner on "
                    "precomputed image features.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--pretty", action="store_true",
                        help="human-readable output instead of JSON lines")
    common.add_argument("--seed", type=int, default=_default_seed(),
                        help="RNG seed (default: REFCAP_SEED or "
                             f"{DEFAULT_SEED})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common],
                       help="build vocabulary and encode captions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--max-len", type=int, default=50)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common],
                       help="train a model variant on a prepared dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="refining")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--patience", type=int, default=12)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--clip-norm", type=float, default=5.0,
                   help="global gradient norm cap; <= 0 disables")
    p.add_argument("--embed-dim", type=int, default=1000)
    p.add_argument("--hidden-dim", type=int, default=1000)
    p.add_argument("--attention-dim", type=int, default=512)
    p.add_argument("--reflect-dim", type=int, default=512)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--refiner-layers", type=int, default=1)
    p.add_argument("--val-split", default="val")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", parents=[common],
                       help="caption one image from a feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", default=None,
                   help="vocabulary JSON (default: embedded in checkpoint)")
    p.add_argument("--features", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--beam-size", type=int, default=5)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--trace", default=None,
                   help="write the attention trace JSON here")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("evaluate", parents=[common],
                       help="decode a split and print the metric report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--beam-size", type=int, default=5)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--echo-references", action="store_true",
                   help="score the first reference against itself (test hook)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-attention", parents=[common],
                       help="decode one image and export attention weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", default=None,
                   help="vocabulary JSON (default: embedded in checkpoint)")
    p.add_argument("--features", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam-size", type=int, default=1)
    p.add_argument("--max-len", type=int, default=None)
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(json.dumps({"event": "error", "kind": "numerical",
                          "detail": str(exc)}), file=sys.stderr)
        return 3
    except (DataError, ValueError, OSError) as exc:
        print(json.dumps({"event": "error", "kind": "input",
                          "detail": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
