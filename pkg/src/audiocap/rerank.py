"""Candidate selection: rule-based fluency filter, then weighted encoder/decoder scores.

The decoder score is the per-token log-likelihood, min-max scaled over the
kept set so that it lives on the same [0, 1] footing as the weight on the
cosine term.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from audiocap.decoding import CaptionCandidate
from audiocap.text import tokenize

FluencyDetector = Callable[[CaptionCandidate], bool]  # True means "has a fluency error"

# a 3-gram may occur this many times; the synthetic grammar legitimately
# reuses phrases such as "a burst of" across two events
MAX_TRIGRAM_OCCURRENCES = 2


@dataclass
class RerankConfig:
    w_enc: float = 0.7
    w_dec: float = 0.3

    def __post_init__(self):
        if self.w_enc < 0 or self.w_dec < 0 or abs(self.w_enc + self.w_dec - 1.0) > 1e-9:
            raise ValueError("rerank weights must be non-negative and sum to 1")


def has_fluency_error(candidate: CaptionCandidate) -> bool:
    words = tokenize(candidate.text)
    if not words or not candidate.finished:
        return True
    if any(a == b for a, b in zip(words, words[1:])):
        return True
    trigrams = Counter(tuple(words[i: i + 3]) for i in range(len(words) - 2))
    return any(c > MAX_TRIGRAM_OCCURRENCES for c in trigrams.values())


def fluency_filter(candidates: Sequence[CaptionCandidate],
                   detector: FluencyDetector = has_fluency_error):
    """Split into (kept, rejected); both keep the input order."""
    kept, rejected = [], []
    for c in candidates:
        (rejected if detector(c) else kept).append(c)
    return kept, rejected


def length_normalized(candidate: CaptionCandidate) -> float:
    return candidate.loglik / max(1, candidate.token_count)


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def score_candidates(candidates: Sequence[CaptionCandidate], enc_scores: Sequence[float],
                     config: RerankConfig = RerankConfig(),
                     detector: FluencyDetector = has_fluency_error) -> list[CaptionCandidate]:
    """Annotated copies of ``candidates``; ``final_score`` is set only for fluent ones."""
    if not candidates:
        raise ValueError("rerank needs at least one candidate")
    if len(enc_scores) != len(candidates):
        raise ValueError("need one encoder score per candidate")
    fluent = [not detector(c) for c in candidates]
    kept = [i for i, f in enumerate(fluent) if f]
    dec = np.full(len(candidates), np.nan)
    if kept:
        dec[kept] = _minmax(np.array([length_normalized(candidates[i]) for i in kept]))
    out = []
    for i, c in enumerate(candidates):
        final = config.w_enc * float(enc_scores[i]) + config.w_dec * dec[i] if fluent[i] else None
        out.append(replace(c, enc_score=float(enc_scores[i]), fluent=fluent[i],
                           dec_score=float(dec[i]) if fluent[i] else None, final_score=final))
    return out


def select_index(scored: Sequence[CaptionCandidate]) -> int:
    """Best fluent candidate (ties: higher loglik, then lower index); max loglik if none are fluent."""
    pool = [i for i, c in enumerate(scored) if c.fluent]
    if pool:
        return min(pool, key=lambda i: (-scored[i].final_score, -scored[i].loglik, i))
    return min(range(len(scored)), key=lambda i: (-scored[i].loglik, i))


def rerank_select(candidates: Sequence[CaptionCandidate], audio_emb: np.ndarray,
                  text_embedder: Callable[[list[str]], np.ndarray],
                  config: RerankConfig = RerankConfig(),
                  detector: FluencyDetector = has_fluency_error) -> CaptionCandidate:
    """``text_embedder`` maps a list of captions to unit-norm rows."""
    scored = rerank_table(candidates, audio_emb, text_embedder, config, detector)
    return scored[select_index(scored)]


def rerank_table(candidates: Sequence[CaptionCandidate], audio_emb: np.ndarray,
                 text_embedder: Callable[[list[str]], np.ndarray],
                 config: RerankConfig = RerankConfig(),
                 detector: FluencyDetector = has_fluency_error) -> list[CaptionCandidate]:
    if not candidates:
        raise ValueError("rerank needs at least one candidate")
    enc = np.zeros(len(candidates))
    idx = [i for i, c in enumerate(candidates) if tokenize(c.text)]
    if idx:
        emb = text_embedder([candidates[i].text for i in idx])
        enc[idx] = emb @ np.asarray(audio_emb, dtype=np.float64)
    return score_candidates(candidates, enc, config, detector)


def write_rerank_report(path, rows: Sequence[tuple[str, Sequence[CaptionCandidate], int]]) -> None:
    """JSONL, one line per clip: the scored table and the chosen index."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for audio_id, scored, chosen in rows:
            table = [{"rank": r, "text": c.text, "loglik": c.loglik, "enc_score": c.enc_score,
                      "dec_score": c.dec_score, "fluent": c.fluent, "final_score": c.final_score}
                     for r, c in enumerate(scored)]
            fh.write(json.dumps({"audio_id": audio_id, "selected": chosen,
                                 "caption": scored[chosen].text, "candidates": table}) + "\n")
