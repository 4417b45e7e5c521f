"""Train captioners (one per seed) and compare reranked against random-candidate CIDEr-D.

Each captioner seed reuses the embedder trained with the same seed.

    python scripts/run_captioning.py --root runs/captioning --seeds 0 1 2 3 4
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
from pathlib import Path

from audiocap.config import load_config
from audiocap.experiments import captioning_run, prepare_corpus, train_embedders


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--root", default="runs/captioning")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--data-seed", type=int, default=1)
    parser.add_argument("--config")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)
    corpus = prepare_corpus(args.root, cfg, args.data_seed)
    results = []
    for run in train_embedders(corpus, args.seeds, cfg):
        results.append(captioning_run(corpus, run.embedder, run.seed, cfg))
    summary = {
        "runs": results,
        "median_relative_gain": statistics.median(r["relative_gain"] for r in results),
        "median_mcm_ce": statistics.median(r["mcm_ce"] for r in results),
        "ln_v": results[0]["ln_v"] if results else None,
    }
    out = Path(args.root) / "captioning_results.json"
    out.write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
