"""Uniform model soups and token-level caption ensembles."""

from __future__ import annotations

from collections import OrderedDict
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from audiocap.captioner import CaptionModel
from audiocap.codec import CodeSequence
from audiocap.core.checkpoint import Checkpoint
from audiocap.core.optim import ContractError


def _mean_exact(stack: np.ndarray) -> np.ndarray:
    """Mean along axis 0, independent of source order; exact where all sources agree."""
    ordered = np.sort(stack, axis=0)
    out = ordered.sum(axis=0) / stack.shape[0]
    same = np.all(stack == stack[0], axis=0)
    return np.where(same, stack[0], out)


def soup(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    if not checkpoints:
        raise ContractError("soup needs at least one checkpoint")
    first = checkpoints[0]
    for ck in checkpoints[1:]:
        if ck.arch != first.arch:
            raise ContractError(f"architecture mismatch: {ck.arch!r} vs {first.arch!r}")
        if list(ck.entries) != list(first.entries):
            raise ContractError("parameter names differ between checkpoints")
        for name, arr in ck.entries.items():
            if arr.shape != first.entries[name].shape:
                raise ContractError(f"shape mismatch for {name}: {arr.shape} vs {first.entries[name].shape}")
    entries = OrderedDict(
        (name, _mean_exact(np.stack([ck.entries[name] for ck in checkpoints])))
        for name in first.entries
    )
    meta = {k: v for k, v in first.meta.items() if k in ("config", "vocab")}
    meta["soup_sources"] = len(checkpoints)
    return Checkpoint(entries=entries, arch=first.arch, meta=meta)


def _combine(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Log of the uniform mean of the member distributions."""
    if all(np.array_equal(r, rows[0]) for r in rows[1:]):
        return rows[0].copy()
    stacked = np.stack(rows)
    return logsumexp(stacked, axis=0) - np.log(len(rows))


class CaptionEnsemble:
    """Acts like a single CaptionModel for decoding; members share a vocabulary."""

    def __init__(self, models: Sequence[CaptionModel]):
        if not models:
            raise ContractError("an ensemble needs at least one model")
        vocab = models[0].vocab
        for m in models[1:]:
            if m.vocab != vocab:
                raise ContractError("ensemble members have different vocabularies")
        self.models = list(models)
        self.vocab = vocab
        self.config = models[0].config

    def encode(self, codes: np.ndarray, seq_emb: np.ndarray):
        return [m.encode(codes, seq_emb) for m in self.models]

    def next_logprobs(self, memory, prefixes: np.ndarray) -> np.ndarray:
        per_model = [m.next_logprobs(mem, prefixes) for m, mem in zip(self.models, memory)]
        return np.stack([_combine([p[i] for p in per_model]) for i in range(len(prefixes))])


def ensemble_next_token(models: Sequence[CaptionModel], codes: CodeSequence | np.ndarray,
                        seq_emb: np.ndarray, prefix: Sequence[int]) -> np.ndarray:
    codes = codes.codes if isinstance(codes, CodeSequence) else np.asarray(codes)
    prefix = list(prefix)
    ens = CaptionEnsemble(models)
    if not prefix or prefix[0] != ens.vocab.start_id:
        raise ContractError("prefix must begin with the start token")
    memory = ens.encode(codes, np.asarray(seq_emb))
    return ens.next_logprobs(memory, np.asarray([prefix]))[0]
