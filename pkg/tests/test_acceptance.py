"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The lines are also collected and repeated in the pytest terminal summary.
Run alone with ``pytest tests/test_acceptance.py -s``.
"""

import statistics
import time
from collections import OrderedDict

import numpy as np
import pytest

from audiocap import captioner as cap
from audiocap import embedder as emb
from audiocap.codec import analysis_frames, encode, quantization_error, quantize_frames, train_codebooks
from audiocap.config import load_config
from audiocap.core import tensor as T
from audiocap.core.checkpoint import Checkpoint
from audiocap.core.gradcheck import grad_check
from audiocap.decoding import GenerationConfig, generate_candidates, nucleus_sample, write_candidates
from audiocap.ensemble import CaptionEnsemble, soup
from audiocap.experiments import captioning_run, prepare_corpus, retrieval_summary, train_embedders
from audiocap.metrics import SimilarityMatrix, cider_d_scores, map_at_10, recall_at_k
from audiocap.ot import sinkhorn
from audiocap.synthdata import read_wav
from audiocap.text import Vocab

from oracles import brute_force_map10, brute_force_recall, cider_d_oracle, long_run_sinkhorn

RESULTS = []
SEEDS = [0, 1, 2, 3, 4]


def report(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Default 200/50/50 corpus with the K=8, V=64 codec."""
    t0 = time.perf_counter()
    c = prepare_corpus(tmp_path_factory.mktemp("acceptance"), load_config(), data_seed=1)
    c.build_seconds = time.perf_counter() - t0
    return c


@pytest.fixture(scope="module")
def embedder_runs(corpus):
    t0 = time.perf_counter()
    runs = train_embedders(corpus, SEEDS, load_config())
    return runs, time.perf_counter() - t0


def test_1_rvq_monotonicity(corpus):
    t0 = time.perf_counter()
    frames = np.concatenate([analysis_frames(read_wav(e.audio_path)[0], corpus.codec.hop)
                             for e in corpus.split("test")])[:1000]
    _, energy = quantize_frames(corpus.codec, frames)
    start = (frames**2).sum(axis=1)
    monotone = bool(np.all(energy[:, 0] <= start * (1 + 1e-12)) and np.all(np.diff(energy, axis=1) <= 0))
    k1, k8 = quantization_error(corpus.codec, frames, 1), quantization_error(corpus.codec, frames, 8)
    took = time.perf_counter() - t0
    report(1, "RVQ monotonicity", len(frames) == 1000 and monotone and k8 <= 0.5 * k1 and took < 60,
           f"{len(frames)} held-out frames, per-frame non-increasing={monotone}, "
           f"MSE K=8/K=1 = {k8:.3e}/{k1:.3e} = {k8 / k1:.3f} (<= 0.5), {took:.1f}s")


def test_2_frame_rate_contract(corpus):
    frames = np.concatenate([analysis_frames(read_wav(e.audio_path)[0], 320) for e in corpus.split("train")[:8]])
    codec = train_codebooks(frames, num_stages=32, codebook_size=4, iters=1, seed=0)
    seq = encode(codec, np.random.default_rng(0).normal(scale=0.1, size=24000), 24000)
    report(2, "frame-rate contract", seq.codes.shape == (75, 32) and codec.frame_rate == 75.0,
           f"1.0 s at 24 kHz -> codes {seq.codes.shape}, {codec.frame_rate:g} Hz")


def test_3_sinkhorn_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst, unconverged = 0.0, 0
    for _ in range(100):
        n, m = rng.integers(1, 65, size=2)
        cost = rng.uniform(0, rng.choice([0.5, 1.0, 2.0]), size=(n, m))
        res = sinkhorn(cost)
        unconverged += not res.converged
        worst = max(worst, np.abs(res.plan.sum(1) - 1 / n).max(), np.abs(res.plan.sum(0) - 1 / m).max())
    anti = np.array([[1.0, 0.0], [0.0, 1.0]])
    gap = float(np.abs(sinkhorn(anti).plan - long_run_sinkhorn(anti, 0.05)).max())
    took = time.perf_counter() - t0
    report(3, "Sinkhorn correctness", worst < 1e-6 and gap < 1e-3 and took < 60,
           f"max marginal violation {worst:.2e} (< 1e-6) over 100 costs up to 64x64 "
           f"({unconverged} unconverged), anti-diagonal gap {gap:.2e} (< 1e-3), {took:.1f}s")


def _unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_4_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    a0, t_0 = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    mltm_err = max(
        grad_check(lambda x: emb.mltm_loss(T.l2_normalize(x), _unit(t_0), 0.05), a0, 1e-6),
        grad_check(lambda x: emb.mltm_loss(_unit(a0), T.l2_normalize(x), 0.05), t_0, 1e-6),
        grad_check(lambda x: emb.mltm_loss(T.l2_normalize(x), _unit(t_0), 0.05, ["a", "b", "a", "c"]),
                   a0, 1e-6),
    )
    vocab = Vocab.build(["a low tone", "a burst hums"])
    cfg = cap.CaptionerConfig(num_stages=3, codebook_size=5, embed_dim=4, d_model=8, n_heads=2, ff_dim=12,
                              max_frames=4, max_len=6)
    model = cap.init_captioner(cfg, vocab, rng)
    for key in model.params:
        if key.startswith(("out.", "mcm.")):  # zero-initialized heads would hide upstream gradients
            model.params[key].data = rng.normal(0, 0.3, model.params[key].shape)
    batch = [cap.CaptionExample(str(i), rng.integers(0, 5, (2, 3)), rng.normal(size=4),
                                np.array(vocab.encode(text))) for i, text in enumerate(["a low tone", "a burst hums"])]
    masks = [cap.mcm_mask(e.codes, cap.McmConfig(mask_rate=1.0, masked_stages=2), 5, 0) for e in batch]
    cap_err = 0.0
    for key in model.params:
        def loss(x, key=key):
            params = dict(model.params)
            params[key] = x
            return cap.caption_loss(params, cfg, vocab, batch, masks, 0.3)[0]
        cap_err = max(cap_err, grad_check(loss, model.params[key].data, 1e-6))
    took = time.perf_counter() - t0
    report(4, "gradient fidelity", mltm_err < 1e-4 and cap_err < 1e-4 and took < 60,
           f"mltm rel err {mltm_err:.1e}, captioner (2 frames, 3 tokens, MCM on, all "
           f"{len(model.params)} tensors) rel err {cap_err:.1e} (< 1e-4), {took:.1f}s")


def test_5_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    mismatches = 0
    for trial in range(100):
        values = rng.normal(size=(50, 50))
        if trial % 3 == 0:
            values = np.round(values, 1)
        rel = [tuple(rng.choice(50, size=rng.integers(1, 4), replace=False)) for _ in range(50)]
        sim = SimilarityMatrix(values, [f"q{i}" for i in range(50)], [f"a{j}" for j in range(50)], rel)
        sets = [set(r) for r in rel]
        mismatches += map_at_10(sim) != brute_force_map10(values, sets)
        mismatches += sum(recall_at_k(sim, k) != brute_force_recall(values, sets, k) for k in (1, 5, 10))
    cands = {"c1": "a low steady tone sounds", "c2": "a burst of noise hisses then a chirp sweeps",
             "c3": "a slow clicking sound repeats", "c4": "a high buzzing hum drones briefly", "c5": ""}
    refs = {"c1": ["a steady tone sounds", "a low steady tone sounds"],
            "c2": ["a burst of noise hisses then a falling chirp sweeps"],
            "c3": ["a fast clicking sound repeats", "a slow clicking sound repeats briefly"],
            "c4": ["a high buzzing hum drones briefly"], "c5": ["a low warbling tone pulses"]}
    ours, theirs = cider_d_scores(cands, refs), cider_d_oracle(cands, refs)
    cider_gap = max(abs(ours[k] - theirs[k]) for k in cands)
    took = time.perf_counter() - t0
    report(5, "metric oracles", mismatches == 0 and cider_gap < 1e-6 and took < 60,
           f"{mismatches} inexact mAP@10/R@k values on 100 random 50x50 matrices, "
           f"CIDEr-D max gap {cider_gap:.1e} (< 1e-6) on 5 items, {took:.1f}s")


def test_6_nucleus_statistics():
    t0 = time.perf_counter()
    draws = 100_000
    counts = np.bincount(nucleus_sample(np.log([0.5, 0.3, 0.2]), 0.6, 1.0, np.random.default_rng(6), draws),
                         minlength=3)
    freq = counts / draws
    z = [abs(freq[k] - p) / np.sqrt(p * (1 - p) / draws) for k, p in ((0, 0.625), (1, 0.375))]
    took = time.perf_counter() - t0
    report(6, "nucleus statistics", max(z) < 3 and counts[2] == 0 and took < 10,
           f"frequencies {np.round(freq, 4).tolist()} vs [0.625, 0.375, 0], max |z| {max(z):.2f} (< 3), "
           f"{took:.2f}s")


@pytest.mark.slow
def test_7_retrieval_target(corpus, embedder_runs):
    runs, seconds = embedder_runs
    summary = retrieval_summary(corpus, runs, ensemble_size=3)
    med, ens = summary["median_map10"], summary["ensemble_map10"]
    singles = ", ".join(f"{v:.3f}" for v in summary["single_map10"])
    report(7, "retrieval desk-scale target", med >= 0.80 and ens >= med and seconds < 15 * 60,
           f"val mAP@10 per seed [{singles}], median {med:.3f} (>= 0.80), 3-seed ensemble {ens:.3f} "
           f"(>= median), {seconds / 60:.1f} min")


@pytest.mark.slow
def test_8_captioning_target(corpus, embedder_runs):
    runs, _ = embedder_runs
    t0 = time.perf_counter()
    results = [captioning_run(corpus, run.embedder, run.seed, load_config()) for run in runs]
    took = time.perf_counter() - t0
    gain = statistics.median(r["relative_gain"] for r in results)
    ln_v = results[0]["ln_v"]
    worst_ce = max(r["mcm_ce"] for r in results)
    gains = ", ".join(f"{100 * r['relative_gain']:.0f}%" for r in results)
    report(8, "captioning desk-scale target", gain >= 0.10 and worst_ce < ln_v and took < 30 * 60,
           f"reranked vs random-candidate CIDEr-D gain per seed [{gains}], median {100 * gain:.1f}% "
           f"(>= 10%), worst MCM CE {worst_ce:.3f} < ln V = {ln_v:.3f}, {took / 60:.1f} min")


def test_9_soup_and_ensemble_identities(tiny_models, tmp_path):
    m = tiny_models["ckpt"]
    souped = soup([m, m])
    same_soup = all(np.array_equal(souped.entries[k], m.entries[k]) for k in m.entries) and \
        all(np.array_equal(soup([m]).entries[k], m.entries[k]) for k in m.entries)
    rng = np.random.default_rng(9)
    a = Checkpoint(OrderedDict((k, rng.normal(size=v.shape)) for k, v in m.entries.items()), m.arch, m.meta)
    b = Checkpoint(OrderedDict((k, rng.normal(size=v.shape)) for k, v in m.entries.items()), m.arch, m.meta)
    mean_exact = all(np.array_equal(soup([a, b]).entries[k], (a.entries[k] + b.entries[k]) / 2) for k in m.entries)

    model = tiny_models["captioner"]
    gen = GenerationConfig(seed=1, num_candidates=10)
    outputs = []
    for name, step_model in (("single", model), ("soup", cap.from_checkpoint(souped)),
                             ("ensemble", CaptionEnsemble([model, model, model]))):
        rows = [(e.clip_id, generate_candidates(step_model, e.codes, e.seq_emb, gen))
                for e in tiny_models["test"][:3]]
        write_candidates(tmp_path / f"{name}.jsonl", rows)
        outputs.append((tmp_path / f"{name}.jsonl").read_bytes())
    same_behavior = outputs[0] == outputs[1] == outputs[2]
    report(9, "soup/ensemble identities", same_soup and mean_exact and same_behavior,
           f"soup([M])=soup([M,M])=M exactly: {same_soup}; soup([A,B]) == (A+B)/2 bitwise: {mean_exact}; "
           f"single/soup/3x-ensemble candidate dumps byte-identical: {same_behavior}")


def test_10_cli_reproducibility(cli_runs):
    trees = []
    for root in cli_runs["roots"]:
        trees.append({p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
                      if p.is_file()})
    ok_codes = all(code == 0 for codes in cli_runs["codes"] for _, code in codes)
    differing = [k for k in trees[0] if trees[0][k] != trees[1].get(k)]
    kinds = {"manifest": "data/manifest.jsonl", "checkpoints": "captioner.ckpt",
             "candidates": "candidates.jsonl", "metrics": "caption_metrics.json"}
    present = all(v in trees[0] for v in kinds.values())
    report(10, "CLI reproducibility",
           ok_codes and present and not differing and trees[0].keys() == trees[1].keys(),
           f"{len(cli_runs['codes'][0])} subcommands x 2 runs all exit 0: {ok_codes}; "
           f"{len(trees[0])} files compared, {len(differing)} differ")
