"""Retrieval and captioning metrics.

Rankings sort by descending similarity and break ties by lower item index.
CIDEr-D follows the reference COCO scorer, including its habit of measuring
sentence length as the number of bigrams.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from audiocap.text import tokenize


class MetricInputError(ValueError):
    """Similarity matrices or caption maps are inconsistent."""


@dataclass
class SimilarityMatrix:
    values: np.ndarray                 # (N_query, N_item)
    query_ids: list[str]
    item_ids: list[str]
    relevance: list[tuple[int, ...]]   # per query, relevant item indices

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.query_ids), len(self.item_ids)):
            raise MetricInputError("values shape does not match id lists")
        if len(self.relevance) != len(self.query_ids):
            raise MetricInputError("need one relevance set per query")
        if not np.isfinite(self.values).all():
            raise MetricInputError("similarity values must be finite")
        self.relevance = [tuple(sorted(set(int(i) for i in r))) for r in self.relevance]
        if any(not r for r in self.relevance):
            raise MetricInputError("every query needs at least one relevant item")


def build_similarity(audio_embs: np.ndarray, text_embs: np.ndarray,
                     audio_ids: Sequence[str] | None = None,
                     text_ids: Sequence[str] | None = None,
                     relevance: Sequence[Sequence[int]] | None = None) -> SimilarityMatrix:
    """Text queries against audio items; values are cosines of unit vectors.

    Without explicit relevance, query i is paired with item i.
    """
    a = np.asarray(audio_embs, dtype=np.float64)
    t = np.asarray(text_embs, dtype=np.float64)
    if a.ndim != 2 or t.ndim != 2 or a.shape[1] != t.shape[1]:
        raise MetricInputError(f"embedding dimension mismatch: {a.shape} vs {t.shape}")
    audio_ids = list(audio_ids) if audio_ids is not None else [str(i) for i in range(len(a))]
    text_ids = list(text_ids) if text_ids is not None else [str(i) for i in range(len(t))]
    if relevance is None:
        if len(a) != len(t):
            raise MetricInputError("default pairing needs as many queries as items")
        relevance = [(i,) for i in range(len(t))]
    return SimilarityMatrix(t @ a.T, text_ids, audio_ids, list(relevance))


def caption_relevance(query_texts: Sequence[str], item_captions: Sequence[Sequence[str]]):
    """Item j is relevant to a query when one of its captions equals the query text."""
    owners: dict[str, set[int]] = defaultdict(set)
    for j, caps in enumerate(item_captions):
        for c in caps:
            owners[" ".join(tokenize(c))].add(j)
    return [tuple(sorted(owners.get(" ".join(tokenize(q)), ()))) for q in query_texts]


def rank_items(row: np.ndarray) -> np.ndarray:
    return np.argsort(-np.asarray(row), kind="stable")


def _relevant_ranks(sim: SimilarityMatrix) -> list[np.ndarray]:
    """1-based ranks of the relevant items for each query."""
    out = []
    for row, rel in zip(sim.values, sim.relevance):
        pos = np.empty(len(row), dtype=np.int64)
        pos[rank_items(row)] = np.arange(1, len(row) + 1)
        out.append(np.sort(pos[list(rel)]))
    return out


def recall_at_k(sim: SimilarityMatrix, k: int) -> float:
    if k < 1:
        raise MetricInputError("k must be >= 1")
    hits = [ranks[0] <= k for ranks in _relevant_ranks(sim)]
    return float(np.mean(hits)) if hits else 0.0


def average_precision_at_10(sim: SimilarityMatrix) -> np.ndarray:
    aps = []
    for ranks, rel in zip(_relevant_ranks(sim), sim.relevance):
        top = ranks[ranks <= 10]
        precisions = np.arange(1, len(top) + 1) / top
        aps.append(math.fsum(precisions) / min(10, len(rel)))
    return np.asarray(aps, dtype=np.float64)


def map_at_10(sim: SimilarityMatrix) -> float:
    aps = average_precision_at_10(sim)
    # correctly rounded sum: the result does not depend on query order
    return math.fsum(aps) / aps.size if aps.size else 0.0


def retrieval_report(sim: SimilarityMatrix) -> dict:
    return {
        "mAP@10": map_at_10(sim),
        "R@1": recall_at_k(sim, 1),
        "R@5": recall_at_k(sim, 5),
        "R@10": recall_at_k(sim, 10),
    }


def ensemble_sims(matrices: Sequence[SimilarityMatrix],
                  weights: Sequence[float] | None = None) -> SimilarityMatrix:
    if not matrices:
        raise MetricInputError("nothing to ensemble")
    weights = [1.0] * len(matrices) if weights is None else list(weights)
    if len(weights) != len(matrices) or any(w < 0 for w in weights) or sum(weights) <= 0:
        raise MetricInputError("weights must be non-negative, one per matrix, with positive sum")
    first = matrices[0]
    for m in matrices[1:]:
        if (m.values.shape != first.values.shape or m.query_ids != first.query_ids
                or m.item_ids != first.item_ids):
            raise MetricInputError("similarity matrices differ in shape or id ordering")
    total = float(sum(weights))
    active = [(w, m) for w, m in zip(weights, matrices) if w > 0]
    if len(active) == 1:
        values = active[0][1].values.copy()
    else:
        values = np.zeros_like(first.values)
        for w, m in active:
            values = values + (w / total) * m.values
    return SimilarityMatrix(values, list(first.query_ids), list(first.item_ids), list(first.relevance))


def save_similarity(sim: SimilarityMatrix, path) -> None:
    """JSONL: a header line with item ids, then one line per query."""
    lines = [json.dumps({"item_ids": sim.item_ids})]
    for qid, rel, row in zip(sim.query_ids, sim.relevance, sim.values):
        lines.append(json.dumps({"query_id": qid, "relevant": list(rel), "scores": row.tolist()}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_similarity(path) -> SimilarityMatrix:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise MetricInputError(f"{path}: empty similarity file")
    items = json.loads(lines[0])["item_ids"]
    rows = [json.loads(line) for line in lines[1:] if line.strip()]
    return SimilarityMatrix(
        np.array([r["scores"] for r in rows], dtype=np.float64).reshape(len(rows), len(items)),
        [r["query_id"] for r in rows], items, [tuple(r["relevant"]) for r in rows],
    )


# ---------------------------------------------------------------------------
# captioning


def _ngrams(words: Sequence[str], n: int) -> Counter:
    counts: Counter = Counter()
    for k in range(1, n + 1):
        for i in range(len(words) - k + 1):
            counts[tuple(words[i: i + k])] += 1
    return counts


def cider_d_scores(candidates: Mapping[str, str], references: Mapping[str, Sequence[str]],
                   n: int = 4, sigma: float = 6.0) -> dict[str, float]:
    """Per-item CIDEr-D; document frequencies come from the references."""
    ids = sorted(candidates)
    for i in ids:
        if i not in references or not references[i]:
            raise MetricInputError(f"no references for candidate {i!r}")
    ref_counts = {i: [_ngrams(tokenize(r), n) for r in references[i]] for i in ids}
    df: Counter = Counter()
    for i in ids:
        for gram in {g for c in ref_counts[i] for g in c}:
            df[gram] += 1
    log_n = math.log(float(len(ids)))

    def vectorize(counts: Counter):
        vec = [dict() for _ in range(n)]
        norm = [0.0] * n
        length = 0
        for gram, tf in counts.items():
            k = len(gram) - 1
            weight = tf * (log_n - math.log(max(1.0, df[gram])))
            vec[k][gram] = weight
            norm[k] += weight * weight
            if k == 1:
                length += tf
        return vec, [math.sqrt(x) for x in norm], length

    def sim(hyp, ref) -> np.ndarray:
        (vh, nh, lh), (vr, nr, lr) = hyp, ref
        delta = float(lh - lr)
        val = np.zeros(n)
        for k in range(n):
            for gram, w in vh[k].items():
                val[k] += min(w, vr[k].get(gram, 0.0)) * vr[k].get(gram, 0.0)
            if nh[k] != 0 and nr[k] != 0:
                val[k] /= nh[k] * nr[k]
            val[k] *= math.exp(-(delta**2) / (2 * sigma**2))
        return val

    scores = {}
    for i in ids:
        hyp = vectorize(_ngrams(tokenize(candidates[i]), n))
        total = np.zeros(n)
        for rc in ref_counts[i]:
            total += sim(hyp, vectorize(rc))
        scores[i] = float(np.mean(total) / len(ref_counts[i]) * 10.0)
    return scores


def cider_d(candidates: Mapping[str, str], references: Mapping[str, Sequence[str]]) -> float:
    scores = cider_d_scores(candidates, references)
    return float(np.mean([scores[i] for i in sorted(scores)])) if scores else 0.0


def vocabulary_size(texts: Sequence[str]) -> int:
    return len({w for t in texts for w in tokenize(t)})
