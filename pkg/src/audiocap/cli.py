"""``audiocap`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flag or
subcommand), 3 unreadable or invalid config, 4 missing input artifact.
The output root comes from ``--out``, else ``$AUDIOCAP_OUT``, else ``./run``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from audiocap import pipeline
from audiocap.config import ConfigError, load_config
from audiocap.core.checkpoint import CheckpointError

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3, 4
OUT_ENV = "AUDIOCAP_OUT"

log = logging.getLogger("audiocap")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed for every stage")
    common.add_argument("--config", help="INI config file")
    common.add_argument("--out", help=f"output root (default: ${OUT_ENV} or ./run)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="audiocap", description="Codec-token audio captioning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="render the synthetic corpus")
    sub.add_parser("train-codec", parents=[common], help="fit RVQ codebooks on train clips")
    sub.add_parser("encode", parents=[common], help="encode every clip to code sequences")
    p = sub.add_parser("train-embed", parents=[common], help="train the audio-text embedder")
    p.add_argument("--output", help="checkpoint path (default: <out>/embedder.ckpt)")
    p = sub.add_parser("train-captioner", parents=[common], help="pretrain (+MCM) and finetune the captioner")
    p.add_argument("--output", help="checkpoint path (default: <out>/captioner.ckpt)")
    p.add_argument("--embedder", help="embedder checkpoint (default: <out>/embedder.ckpt)")
    p = sub.add_parser("caption", parents=[common], help="sample, rerank and write captions")
    p.add_argument("--split", default="test")
    p.add_argument("--captioner", help="captioner checkpoint (default: <out>/captioner.ckpt)")
    p.add_argument("--embedder", help="embedder checkpoint used for reranking")
    p = sub.add_parser("retrieve", parents=[common], help="text-to-audio similarity matrix")
    p.add_argument("--split", default="test")
    p.add_argument("--embedder", action="append", help="embedder checkpoint; repeat to ensemble")
    p.add_argument("--output", help="similarity file (default: <out>/similarity.jsonl)")
    p = sub.add_parser("eval-captions", parents=[common], help="CIDEr-D and vocabulary of captions")
    p.add_argument("--split", default="test")
    p.add_argument("--prefix", default="", help="artifact name prefix, e.g. 'ensemble_'")
    p = sub.add_parser("eval-retrieval", parents=[common], help="mAP@10 and R@k of a similarity file")
    p.add_argument("--similarity", help="similarity file (default: <out>/similarity.jsonl)")
    p.add_argument("--output", help="report path (default: <out>/retrieval_metrics.json)")
    p = sub.add_parser("soup", parents=[common], help="uniformly average checkpoints")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--output", required=True)
    p = sub.add_parser("ensemble-caption", parents=[common], help="caption with a token-level ensemble")
    p.add_argument("--split", default="test")
    p.add_argument("--captioner", action="append", required=True, help="member checkpoint; repeat")
    p.add_argument("--embedder", help="embedder checkpoint used for reranking")
    return parser


def _dispatch(args, cfg, layout: pipeline.Layout) -> None:
    cmd, seed = args.command, args.seed
    if cmd == "synth":
        path = pipeline.run_synth(cfg, seed, layout)
        log.info("wrote %s", path)
    elif cmd == "train-codec":
        model = pipeline.run_train_codec(cfg, seed, layout)
        log.info("codec distortion per stage: %s", model.train_distortion)
    elif cmd == "encode":
        log.info("encoded %d clips", pipeline.run_encode(layout))
    elif cmd == "train-embed":
        pipeline.run_train_embed(cfg, seed, layout, out_path=args.output)
    elif cmd == "train-captioner":
        pipeline.run_train_captioner(cfg, seed, layout, embedder_path=args.embedder, out_path=args.output)
    elif cmd == "caption":
        pipeline.run_caption(cfg, seed, layout, args.split,
                             [args.captioner] if args.captioner else None, args.embedder)
    elif cmd == "ensemble-caption":
        pipeline.run_caption(cfg, seed, layout, args.split, args.captioner, args.embedder,
                             prefix="ensemble_")
    elif cmd == "retrieve":
        pipeline.run_retrieve(layout, args.split, args.embedder, args.output)
    elif cmd == "eval-retrieval":
        report = pipeline.run_eval_retrieval(layout, args.similarity, args.output)
        print({k: v for k, v in report.items() if k != "per_query_ap10"})
    elif cmd == "eval-captions":
        print(pipeline.run_eval_captions(layout, args.split, args.prefix))
    elif cmd == "soup":
        pipeline.run_soup(args.inputs, args.output)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        print(f"audiocap: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or os.environ.get(OUT_ENV) or "run"
    try:
        _dispatch(args, cfg, pipeline.Layout(Path(out)))
    except pipeline.MissingArtifactError as exc:
        print(f"audiocap: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CheckpointError, ValueError, OSError) as exc:
        print(f"audiocap: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
