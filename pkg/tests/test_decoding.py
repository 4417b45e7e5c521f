import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from audiocap import captioner as cap
from audiocap.decoding import (CaptionCandidate, GenerationConfig, generate_candidates, greedy_decode,
                               nucleus_distribution, nucleus_sample, nucleus_step, read_candidates, write_candidates)

finite_rows = arrays(np.float64, st.integers(1, 40), elements=st.floats(-30, 0))


def test_identity_configuration():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    assert np.allclose(nucleus_distribution(np.log(p), 1.0, 1.0), p, atol=1e-15)


def test_spec_distribution_empirical_frequencies():
    lp = np.log([0.5, 0.3, 0.2])
    dist = nucleus_distribution(lp, 0.6, 1.0)
    assert np.allclose(dist, [0.625, 0.375, 0.0], atol=1e-12)
    draws = 100_000
    counts = np.bincount(nucleus_sample(lp, 0.6, 1.0, np.random.default_rng(2024), draws), minlength=3)
    assert counts[2] == 0
    for k, p in enumerate([0.625, 0.375]):
        sigma = np.sqrt(p * (1 - p) / draws)
        assert abs(counts[k] / draws - p) < 3 * sigma


@given(finite_rows, st.floats(0.01, 1.0), st.floats(0.05, 5.0), st.integers(0, 2**32 - 1))
def test_batched_draws_equal_successive_steps(row, top_p, temperature, seed):
    rng = np.random.default_rng(seed)
    steps = [nucleus_step(row, top_p, temperature, rng) for _ in range(20)]
    assert nucleus_sample(row, top_p, temperature, np.random.default_rng(seed), 20).tolist() == steps


def test_singleton_nucleus_returns_argmax(rng):
    lp = np.log([0.2, 0.5, 0.3])
    assert all(nucleus_step(lp, 0.3, 1.0, rng) == 1 for _ in range(200))


def test_ties_keep_lower_token_id():
    dist = nucleus_distribution(np.log([0.25, 0.25, 0.25, 0.25]), 0.5, 1.0)
    assert np.array_equal(dist, [0.5, 0.5, 0.0, 0.0])


def test_temperature_applies_before_truncation():
    # at T=0.5 the tempered mass of token 0 is 0.25/0.38 > 0.6, so the nucleus is a singleton
    dist = nucleus_distribution(np.log([0.5, 0.3, 0.2]), 0.6, 0.5)
    assert np.array_equal(dist, [1.0, 0.0, 0.0])


def test_non_finite_logprobs_rejected(rng):
    with pytest.raises(ValueError):
        nucleus_step(np.array([0.0, np.nan]), 0.9, 1.0, rng)
    with pytest.raises(ValueError):
        nucleus_distribution(np.array([-np.inf, 0.0]), 0.9, 1.0)


@given(finite_rows, st.floats(0.01, 1.0), st.floats(0.05, 5.0))
def test_nucleus_properties(row, top_p, temperature):
    dist = nucleus_distribution(row, top_p, temperature)
    assert abs(dist.sum() - 1.0) < 1e-9
    assert dist[int(np.argmax(row))] > 0
    assert (dist >= 0).all()


@pytest.mark.parametrize("kwargs", [{"top_p": 0.0}, {"top_p": 1.5}, {"temperature": 0.0},
                                    {"num_candidates": 0}])
def test_generation_config_validation(kwargs):
    with pytest.raises(ValueError):
        GenerationConfig(**kwargs)


def test_generation_config_defaults():
    cfg = GenerationConfig()
    assert (cfg.top_p, cfg.temperature, cfg.num_candidates) == (0.95, 0.5, 30)


def _clip(tiny_models, i=0):
    e = tiny_models["test"][i]
    return e.codes, e.seq_emb


def test_generates_requested_count_with_replayable_logliks(tiny_models):
    model = tiny_models["captioner"]
    codes, emb = _clip(tiny_models)
    cands = generate_candidates(model, codes, emb, GenerationConfig(seed=3, temperature=1.0))
    assert len(cands) == 30
    end = model.vocab.end_id
    for c in cands:
        assert c.finished == (c.tokens[-1] == end) and (c.finished or len(c.tokens) == 24)
        # step-by-step replay of every sampled token
        prefix, total = [model.vocab.start_id], 0.0
        for tok in c.tokens:
            total += cap.next_token_logprobs(model, codes, emb, prefix)[tok]
            prefix.append(tok)
        assert abs(total - c.loglik) < 1e-9
        if c.finished:
            assert abs(cap.forward_loglik(model, codes, emb, c.tokens[:-1])[0] - c.loglik) < 1e-9


def test_tiny_temperature_matches_greedy(tiny_models):
    model = tiny_models["captioner"]
    for i in range(3):
        codes, emb = _clip(tiny_models, i)
        greedy = greedy_decode(model, codes, emb)
        cands = generate_candidates(model, codes, emb, GenerationConfig(temperature=1e-6, seed=i))
        assert all(c.tokens == greedy for c in cands)


def test_generation_is_reproducible(tiny_models, tmp_path):
    model = tiny_models["captioner"]
    codes, emb = _clip(tiny_models, 1)
    runs = []
    for name in ("a", "b"):
        cands = generate_candidates(model, codes, emb, GenerationConfig(seed=9, num_candidates=12))
        write_candidates(tmp_path / f"{name}.jsonl", [("clip", cands)])
        runs.append((tmp_path / f"{name}.jsonl").read_bytes())
    assert runs[0] == runs[1]
    other = generate_candidates(model, codes, emb, GenerationConfig(seed=10, num_candidates=12))
    assert [c.tokens for c in other] != [json.loads(x)["tokens"] for x in runs[0].decode().splitlines()]


def test_candidate_file_round_trip(tmp_path):
    cands = [CaptionCandidate("a low tone hums", [3, 4, 5, 6, 1], -2.5),
             CaptionCandidate("a", [3] * 4, -9.0, finished=False)]
    write_candidates(tmp_path / "c.jsonl", [("x", cands)])
    rows = [json.loads(x) for x in (tmp_path / "c.jsonl").read_text().splitlines()]
    assert [r["rank"] for r in rows] == [0, 1] and rows[0]["audio_id"] == "x"
    back = read_candidates(tmp_path / "c.jsonl")["x"]
    assert [(c.text, c.tokens, c.loglik, c.finished) for c in back] == \
        [(c.text, c.tokens, c.loglik, c.finished) for c in cands]
