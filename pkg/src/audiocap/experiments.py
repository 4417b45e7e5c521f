"""Desk-scale experiments shared by ``scripts/`` and the acceptance tests.

One synthetic corpus and one codec are built per run; every training seed
then gets its own embedder and captioner.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from audiocap import captioner as cap
from audiocap import embedder as emb
from audiocap.config import PipelineConfig, stage_seed
from audiocap.metrics import cider_d, ensemble_sims, map_at_10
from audiocap.pipeline import (Layout, caption_examples, caption_split, expected_random_cider,
                               clip_embeddings, run_encode, run_synth, run_train_codec)
from audiocap.synthdata import load_manifest, read_wav, split_entries
from audiocap.text import Vocab

log = logging.getLogger(__name__)


@dataclass
class Corpus:
    layout: Layout
    entries: list
    codec: object

    def split(self, name: str):
        return split_entries(self.entries, name)


def prepare_corpus(root, cfg: PipelineConfig | None = None, data_seed: int = 1) -> Corpus:
    cfg = cfg or PipelineConfig()
    layout = Layout(Path(root))
    if not layout.manifest.is_file():
        run_synth(cfg, data_seed, layout)
    codec = run_train_codec(cfg, data_seed, layout)
    run_encode(layout)
    return Corpus(layout, load_manifest(layout.manifest), codec)


@dataclass
class SeedRun:
    seed: int
    val_map10: float
    embedder: emb.JointEmbedder
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)


def train_embedders(corpus: Corpus, seeds: Sequence[int], cfg: PipelineConfig | None = None) -> list[SeedRun]:
    cfg = cfg or PipelineConfig()
    runs = []
    for seed in seeds:
        t0 = time.perf_counter()
        ckpt, _ = emb.train_embedder(corpus.entries, cfg.embedder, stage_seed(seed, "embedder"))
        runs.append(SeedRun(seed, float(ckpt.meta["val_map10"]), emb.from_checkpoint(ckpt),
                            time.perf_counter() - t0))
        log.info("embedder seed %d: val mAP@10 %.4f (%.0fs)", seed, runs[-1].val_map10, runs[-1].seconds)
    return runs


def val_similarity(corpus: Corpus, model: emb.JointEmbedder):
    val = corpus.split("val")
    feats = [emb.clip_features(model, *read_wav(e.audio_path)) for e in val]
    return emb.retrieval_similarity(model, feats, val)


def retrieval_summary(corpus: Corpus, runs: Sequence[SeedRun], ensemble_size: int = 3) -> dict:
    singles = [r.val_map10 for r in runs]
    members = runs[:ensemble_size]
    ens = ensemble_sims([val_similarity(corpus, r.embedder) for r in members])
    return {
        "single_map10": singles,
        "median_map10": float(np.median(singles)),
        "ensemble_map10": map_at_10(ens),
        "ensemble_seeds": [r.seed for r in members],
    }


def captioning_run(corpus: Corpus, embedder: emb.JointEmbedder, seed: int,
                   cfg: PipelineConfig | None = None, split: str = "test") -> dict:
    """Train a captioner on top of ``embedder`` and score reranked vs. random candidates."""
    cfg = cfg or PipelineConfig()
    t0 = time.perf_counter()
    train, val = corpus.split("train"), corpus.split("val")
    vocab = Vocab.build(c for e in train for c in e.captions)
    seq = clip_embeddings(embedder, train + val)
    model_cfg = dataclasses.replace(cfg.captioner.model, num_stages=corpus.codec.num_stages,
                                    codebook_size=corpus.codec.codebook_size,
                                    embed_dim=embedder.config.dim)
    train_cfg = dataclasses.replace(cfg.captioner, model=model_cfg)
    ckpt, records = cap.train_captioner(caption_examples(train, corpus.layout, vocab, seq),
                                        caption_examples(val, corpus.layout, vocab, seq), vocab,
                                        train_cfg, stage_seed(seed, "captioner"))
    model = cap.from_checkpoint(ckpt)
    test = corpus.split(split)
    test_examples = caption_examples(test, corpus.layout, vocab, clip_embeddings(embedder, test))
    mcm_ce, mcm_acc = cap.masked_code_ce(model, test_examples, cfg.captioner.pretrain.mcm,
                                         stage_seed(seed, "mcm-eval"))
    run_dir = corpus.layout.root / f"caption_seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    sub_layout = Layout(run_dir, corpus.layout.codes_dir)
    chosen, pools = caption_split(model, embedder, test, sub_layout, cfg.generation, cfg.rerank,
                                  stage_seed(seed, "caption"))
    refs = {e.clip_id: list(e.captions) for e in test}
    result = {
        "seed": seed,
        "reranked_cider": cider_d(chosen, refs),
        "random_cider": expected_random_cider(pools, refs),
        "mcm_ce": mcm_ce,
        "mcm_acc": mcm_acc,
        "ln_v": float(np.log(corpus.codec.codebook_size)),
        "mcm_logged": [r["ce_mcm"] for r in records],
        "seconds": time.perf_counter() - t0,
    }
    result["relative_gain"] = result["reranked_cider"] / result["random_cider"] - 1.0
    log.info("captioner seed %d: reranked %.3f random %.3f gain %.1f%% mcm %.3f",
             seed, result["reranked_cider"], result["random_cider"], 100 * result["relative_gain"], mcm_ce)
    return result
