"""Train several embedder seeds on one synthetic corpus and report retrieval mAP@10.

    python scripts/run_retrieval.py --root runs/retrieval --seeds 0 1 2 3 4
"""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

from audiocap.config import load_config
from audiocap.experiments import prepare_corpus, retrieval_summary, train_embedders


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--root", default="runs/retrieval")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--data-seed", type=int, default=1)
    parser.add_argument("--ensemble-size", type=int, default=3)
    parser.add_argument("--config")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)
    corpus = prepare_corpus(args.root, cfg, args.data_seed)
    runs = train_embedders(corpus, args.seeds, cfg)
    summary = retrieval_summary(corpus, runs, args.ensemble_size)
    summary["seeds"] = args.seeds
    summary["seconds"] = [r.seconds for r in runs]
    out = Path(args.root) / "retrieval_results.json"
    out.write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
