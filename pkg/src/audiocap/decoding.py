"""Nucleus-sampling candidate generation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from audiocap.text import Vocab


class StepModel(Protocol):
    """Anything that can encode a clip and score next tokens (single model or ensemble)."""

    vocab: Vocab

    def encode(self, codes: np.ndarray, seq_emb: np.ndarray): ...

    def next_logprobs(self, memory, prefixes: np.ndarray) -> np.ndarray: ...


@dataclass
class GenerationConfig:
    top_p: float = 0.95
    temperature: float = 0.5
    num_candidates: int = 30
    max_len: int = 24
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be >= 1")


@dataclass
class CaptionCandidate:
    text: str
    tokens: list[int]          # generated ids, end token included when reached
    loglik: float              # untempered model log-likelihood of ``tokens``
    finished: bool = True      # end token reached before max_len
    enc_score: float | None = None
    dec_score: float | None = None
    fluent: bool | None = None
    final_score: float | None = None

    @property
    def token_count(self) -> int:
        return len(self.tokens)


def _nucleus(logprobs, top_p: float, temperature: float):
    """(kept ids in descending-probability order, their renormalized probabilities)."""
    lp = np.asarray(logprobs, dtype=np.float64)
    z = lp / temperature
    top = z.max()
    if not np.isfinite(lp).all():
        raise ValueError("log-probabilities must be finite")
    p = np.exp(z - top)
    p /= p.sum()
    # rank by the raw log-probs: temperature keeps the order and exp() may round ties in
    order = np.argsort(-lp, kind="stable")  # ties keep the lower id first
    cum = np.cumsum(p[order])
    cut = min(int(np.searchsorted(cum, top_p, side="left")), len(order) - 1)
    kept = p[order[: cut + 1]]
    return order[: cut + 1], kept / kept.sum()


def nucleus_distribution(logprobs: np.ndarray, top_p: float, temperature: float) -> np.ndarray:
    """Tempered, top-p-truncated and renormalized distribution over the vocabulary."""
    ids, probs = _nucleus(logprobs, top_p, temperature)
    out = np.zeros(np.shape(logprobs)[-1])
    out[ids] = probs
    return out


def nucleus_step(logprobs: np.ndarray, top_p: float, temperature: float,
                 rng: np.random.Generator) -> int:
    """Inverse-CDF draw over the nucleus, walked in descending-probability order."""
    ids, probs = _nucleus(logprobs, top_p, temperature)
    idx = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
    return int(ids[min(idx, len(ids) - 1)])


def nucleus_sample(logprobs: np.ndarray, top_p: float, temperature: float,
                   rng: np.random.Generator, size: int) -> np.ndarray:
    """``size`` draws from one row; identical to ``size`` successive ``nucleus_step`` calls."""
    ids, probs = _nucleus(logprobs, top_p, temperature)
    idx = np.searchsorted(np.cumsum(probs), rng.random(size), side="right")
    return ids[np.minimum(idx, len(ids) - 1)]


def generate_candidates(model: StepModel, codes: np.ndarray, seq_emb: np.ndarray,
                        config: GenerationConfig) -> list[CaptionCandidate]:
    """Sample ``num_candidates`` captions in lockstep; duplicates are kept."""
    vocab = model.vocab
    rng = np.random.default_rng(config.seed)
    memory = model.encode(np.asarray(codes), np.asarray(seq_emb))
    n = config.num_candidates
    prefixes = np.full((n, 1), vocab.start_id, dtype=np.int64)
    logliks = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    generated: list[list[int]] = [[] for _ in range(n)]
    for _ in range(config.max_len):
        live = np.flatnonzero(~done)
        if not live.size:
            break
        rows = model.next_logprobs(memory, prefixes[live])
        step_tokens = np.full(n, vocab.end_id, dtype=np.int64)
        for row, i in zip(rows, live):
            tok = nucleus_step(row, config.top_p, config.temperature, rng)
            step_tokens[i] = tok
            generated[i].append(tok)
            logliks[i] += row[tok]
            if tok == vocab.end_id:
                done[i] = True
        prefixes = np.concatenate([prefixes, step_tokens[:, None]], axis=1)
    return [
        CaptionCandidate(text=vocab.decode(toks), tokens=toks, loglik=float(logliks[i]),
                         finished=bool(done[i]))
        for i, toks in enumerate(generated)
    ]


def greedy_decode(model: StepModel, codes: np.ndarray, seq_emb: np.ndarray, max_len: int = 24) -> list[int]:
    vocab = model.vocab
    memory = model.encode(np.asarray(codes), np.asarray(seq_emb))
    prefix = [vocab.start_id]
    out: list[int] = []
    for _ in range(max_len):
        tok = int(np.argmax(model.next_logprobs(memory, np.asarray([prefix]))[0]))
        out.append(tok)
        if tok == vocab.end_id:
            break
        prefix.append(tok)
    return out


def write_candidates(path, rows: Sequence[tuple[str, Sequence[CaptionCandidate]]]) -> None:
    """Candidate dump: JSONL {audio_id, rank, text, loglik}; rank is sampling order."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for audio_id, cands in rows:
            for rank, c in enumerate(cands):
                fh.write(json.dumps({"audio_id": audio_id, "rank": rank, "text": c.text,
                                     "loglik": c.loglik, "tokens": c.tokens,
                                     "finished": c.finished}) + "\n")


def read_candidates(path) -> dict[str, list[CaptionCandidate]]:
    out: dict[str, list[CaptionCandidate]] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            out.setdefault(row["audio_id"], []).append(CaptionCandidate(
                text=row["text"], tokens=list(row.get("tokens", [])), loglik=row["loglik"],
                finished=row.get("finished", True)))
    return out


def candidate_record(c: CaptionCandidate) -> dict:
    return asdict(c)
