"""Stage functions behind the CLI, operating on a fixed output-directory layout.

Layout under the output root::

    data/manifest.jsonl, data/audio/*.wav     synth
    codec.ckpt                                train-codec
    codes/<clip_id>.rvqc                      encode
    embedder.ckpt, embedder_log.jsonl         train-embed
    captioner.ckpt, captioner_log.jsonl       train-captioner
    candidates.jsonl, rerank.jsonl, captions.json          caption / ensemble-caption
    similarity.jsonl                          retrieve
    retrieval_metrics.json, caption_metrics.json           eval-*

All paths written into artifacts are relative; all randomness comes from
``stage_seed(master, <stage>)``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from audiocap import captioner as cap
from audiocap import codec as rvq
from audiocap import embedder as emb
from audiocap.config import PipelineConfig, stage_seed
from audiocap.core.checkpoint import load_checkpoint, save_checkpoint
from audiocap.decoding import GenerationConfig, generate_candidates, write_candidates
from audiocap.ensemble import CaptionEnsemble, soup
from audiocap.metrics import (cider_d, cider_d_scores, ensemble_sims, load_similarity,
                              retrieval_report, average_precision_at_10, save_similarity,
                              vocabulary_size)
from audiocap.rerank import rerank_table, select_index, write_rerank_report
from audiocap.synthdata import ManifestEntry, build_dataset, load_manifest, read_wav, split_entries
from audiocap.text import Vocab

log = logging.getLogger(__name__)


class MissingArtifactError(FileNotFoundError):
    """A stage input produced by an earlier stage is absent."""


@dataclasses.dataclass
class Layout:
    root: Path
    codes_root: Path | None = None  # lets several run directories share one encoded corpus

    @property
    def manifest(self) -> Path:
        return self.root / "data" / "manifest.jsonl"

    @property
    def codec(self) -> Path:
        return self.root / "codec.ckpt"

    @property
    def codes_dir(self) -> Path:
        return self.codes_root if self.codes_root is not None else self.root / "codes"

    @property
    def embedder(self) -> Path:
        return self.root / "embedder.ckpt"

    @property
    def captioner(self) -> Path:
        return self.root / "captioner.ckpt"

    def codes_for(self, clip_id: str) -> Path:
        return self.codes_dir / f"{clip_id}.rvqc"


def require(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"required input not found: {path}")
    return path


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _entries(manifest) -> list[ManifestEntry]:
    return load_manifest(require(manifest))


# ---------------------------------------------------------------------------
# stages


def run_synth(cfg: PipelineConfig, seed: int, layout: Layout) -> Path:
    return build_dataset(cfg.synth, stage_seed(seed, "synth"), layout.manifest.parent)


def run_train_codec(cfg: PipelineConfig, seed: int, layout: Layout, manifest=None) -> rvq.RvqCodec:
    entries = split_entries(_entries(manifest or layout.manifest), "train")
    if not entries:
        raise ValueError("manifest has no training clips")
    waves = [read_wav(e.audio_path) for e in entries]
    rate = waves[0][1]
    hop = rvq.default_hop(rate)
    frames = np.concatenate([rvq.analysis_frames(w, hop) for w, _ in waves])
    rng = np.random.default_rng(stage_seed(seed, "codec-subsample"))
    if len(frames) > cfg.codec.max_train_frames:
        frames = frames[np.sort(rng.choice(len(frames), cfg.codec.max_train_frames, replace=False))]
    model = rvq.train_codebooks(frames, cfg.codec.num_stages, cfg.codec.codebook_size, cfg.codec.iters,
                                stage_seed(seed, "codec"), rate, hop)
    layout.root.mkdir(parents=True, exist_ok=True)
    rvq.save_codec(model, layout.codec)
    return model


def run_encode(layout: Layout, manifest=None, codec_path=None) -> int:
    model = rvq.load_codec(require(codec_path or layout.codec))
    entries = _entries(manifest or layout.manifest)
    layout.codes_dir.mkdir(parents=True, exist_ok=True)
    for e in entries:
        wave, sr = read_wav(e.audio_path)
        if sr != model.sample_rate:
            wave = rvq.resample(wave, sr, model.sample_rate)
        rvq.save_codes(rvq.encode(model, wave, model.sample_rate), layout.codes_for(e.clip_id))
    return len(entries)


def run_train_embed(cfg: PipelineConfig, seed: int, layout: Layout, manifest=None, out_path=None):
    entries = _entries(manifest or layout.manifest)
    ckpt, records = emb.train_embedder(entries, cfg.embedder, stage_seed(seed, "embedder"),
                                       log_path=layout.root / "embedder_log.jsonl")
    save_checkpoint(ckpt, out_path or layout.embedder)
    return ckpt, records


def clip_embeddings(model: emb.JointEmbedder, entries: Sequence[ManifestEntry]) -> dict[str, np.ndarray]:
    feats = []
    for e in entries:
        wave, sr = read_wav(e.audio_path)
        feats.append(emb.clip_features(model, wave, sr))
    vecs = emb.embed_audio_batch(model, feats)
    return {e.clip_id: v for e, v in zip(entries, vecs)}


def caption_examples(entries: Sequence[ManifestEntry], layout: Layout, vocab: Vocab,
                     seq_embs: dict[str, np.ndarray]) -> list[cap.CaptionExample]:
    out = []
    for e in entries:
        codes = rvq.load_codes(require(layout.codes_for(e.clip_id))).codes
        for c in e.captions:
            out.append(cap.CaptionExample(e.clip_id, codes, seq_embs[e.clip_id], np.asarray(vocab.encode(c))))
    return out


def run_train_captioner(cfg: PipelineConfig, seed: int, layout: Layout, manifest=None,
                        embedder_path=None, out_path=None):
    entries = _entries(manifest or layout.manifest)
    codec_model = rvq.load_codec(require(layout.codec))
    embedder = emb.from_checkpoint(load_checkpoint(require(embedder_path or layout.embedder)))
    train, val = split_entries(entries, "train"), split_entries(entries, "val")
    vocab = Vocab.build(c for e in train for c in e.captions)
    seq = clip_embeddings(embedder, train + val)
    model_cfg = dataclasses.replace(cfg.captioner.model, num_stages=codec_model.num_stages,
                                    codebook_size=codec_model.codebook_size,
                                    embed_dim=embedder.config.dim)
    train_cfg = dataclasses.replace(cfg.captioner, model=model_cfg)
    ckpt, records = cap.train_captioner(
        caption_examples(train, layout, vocab, seq), caption_examples(val, layout, vocab, seq), vocab,
        train_cfg, stage_seed(seed, "captioner"), log_path=layout.root / "captioner_log.jsonl")
    save_checkpoint(ckpt, out_path or layout.captioner)
    return ckpt, records


def caption_split(model, embedder: emb.JointEmbedder, entries: Sequence[ManifestEntry], layout: Layout,
                  generation: GenerationConfig, rerank_cfg, seed: int, prefix: str = ""):
    """Generate, rerank and dump; returns {clip_id: caption} and per-clip candidate texts."""
    seq = clip_embeddings(embedder, entries)
    dumps, reports, chosen, pools = [], [], {}, {}
    max_len = min(generation.max_len, model.config.max_len)
    for k, e in enumerate(entries):
        codes = rvq.load_codes(require(layout.codes_for(e.clip_id))).codes
        gen = dataclasses.replace(generation, max_len=max_len,
                                  seed=stage_seed(seed, f"generate:{e.clip_id}"))
        cands = generate_candidates(model, codes, seq[e.clip_id], gen)
        table = rerank_table(cands, seq[e.clip_id], lambda texts: emb.embed_text_batch(embedder, texts),
                             rerank_cfg)
        best = select_index(table)
        dumps.append((e.clip_id, cands))
        reports.append((e.clip_id, table, best))
        chosen[e.clip_id] = table[best].text
        pools[e.clip_id] = [c.text for c in cands]
    write_candidates(layout.root / f"{prefix}candidates.jsonl", dumps)
    write_rerank_report(layout.root / f"{prefix}rerank.jsonl", reports)
    write_json(layout.root / f"{prefix}captions.json", chosen)
    return chosen, pools


def run_caption(cfg: PipelineConfig, seed: int, layout: Layout, split: str = "test",
                captioner_paths: Sequence[str] | None = None, embedder_path=None, prefix: str = ""):
    entries = split_entries(_entries(layout.manifest), split)
    paths = list(captioner_paths or [layout.captioner])
    models = [cap.from_checkpoint(load_checkpoint(require(p))) for p in paths]
    model = models[0] if len(models) == 1 else CaptionEnsemble(models)
    embedder = emb.from_checkpoint(load_checkpoint(require(embedder_path or layout.embedder)))
    return caption_split(model, embedder, entries, layout, cfg.generation, cfg.rerank,
                         stage_seed(seed, "caption"), prefix)


def run_retrieve(layout: Layout, split: str = "test", embedder_paths: Sequence[str] | None = None,
                 out_path=None):
    entries = split_entries(_entries(layout.manifest), split)
    if not entries:
        raise ValueError(f"manifest has no {split!r} clips")
    sims = []
    for p in embedder_paths or [layout.embedder]:
        model = emb.from_checkpoint(load_checkpoint(require(p)))
        feats = [emb.clip_features(model, *read_wav(e.audio_path)) for e in entries]
        sims.append(emb.retrieval_similarity(model, feats, entries))
    sim = sims[0] if len(sims) == 1 else ensemble_sims(sims)
    save_similarity(sim, out_path or layout.root / "similarity.jsonl")
    return sim


def run_eval_retrieval(layout: Layout, sim_path=None, out_path=None) -> dict:
    sim = load_similarity(require(sim_path or layout.root / "similarity.jsonl"))
    report = retrieval_report(sim)
    report["per_query_ap10"] = dict(zip(sim.query_ids, average_precision_at_10(sim).tolist()))
    write_json(out_path or layout.root / "retrieval_metrics.json", report)
    return report


def expected_random_cider(pools: dict[str, list[str]], references: dict[str, list[str]]) -> float:
    """CIDEr-D of a uniformly random candidate per clip, in expectation.

    Per-item scores only depend on that item's candidate (document frequencies
    come from the references), so the expectation is the mean per-item score
    over each clip's candidate list.
    """
    depth = max(len(v) for v in pools.values())
    per_item = {i: [] for i in pools}
    for j in range(depth):
        picks = {i: cands[j] for i, cands in pools.items() if j < len(cands)}
        for i, s in cider_d_scores(picks, {i: references[i] for i in picks}).items():
            per_item[i].append(s)
    return float(np.mean([np.mean(per_item[i]) for i in sorted(per_item)]))


def run_eval_captions(layout: Layout, split: str = "test", prefix: str = "", out_path=None) -> dict:
    entries = split_entries(_entries(layout.manifest), split)
    refs = {e.clip_id: list(e.captions) for e in entries}
    chosen = json.loads(require(layout.root / f"{prefix}captions.json").read_text(encoding="utf-8"))
    missing = sorted(set(chosen) - set(refs))
    if missing:
        raise ValueError(f"captions for clips outside the {split!r} split: {missing[:3]}")
    report = {"CIDEr-D": cider_d(chosen, refs), "vocabulary": vocabulary_size(list(chosen.values())),
              "num_clips": len(chosen)}
    cand_path = layout.root / f"{prefix}candidates.jsonl"
    if cand_path.is_file():
        pools: dict[str, list[str]] = {}
        for line in cand_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = json.loads(line)
                pools.setdefault(row["audio_id"], []).append(row["text"])
        report["random_candidate_CIDEr-D"] = expected_random_cider(pools, refs)
    write_json(out_path or layout.root / f"{prefix}caption_metrics.json", report)
    return report


def run_soup(inputs: Sequence[str], output) -> None:
    ckpts = [load_checkpoint(require(p)) for p in inputs]
    Path(output).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(soup(ckpts), output)
