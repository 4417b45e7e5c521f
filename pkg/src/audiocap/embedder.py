"""Audio-text joint embedder trained with a minibatch transport-matching loss.

Audio tower: standardized log-mel(+delta) frames -> two GELU layers -> mean
over frames -> linear projection -> unit norm. Text tower: token embeddings
-> mean over tokens -> linear projection -> unit norm. Mean pooling makes the
text tower blind to word order.
"""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from audiocap.core import tensor as T
from audiocap.core.checkpoint import Checkpoint
from audiocap.core.nn import (collect_grads, init_linear, linear, param_arrays,
                              params_from_arrays, zero_grads)
from audiocap.core.optim import AdamState, ContractError, optimizer_step
from audiocap.core.tensor import Tensor, no_grad
from audiocap.features import audio_features
from audiocap.metrics import build_similarity, caption_relevance, map_at_10
from audiocap.ot import sinkhorn
from audiocap.synthdata import ManifestEntry, read_wav
from audiocap.text import Vocab, tokenize

log = logging.getLogger(__name__)

EMBEDDER_ARCH = "joint-embedder-v1"


@dataclass
class EmbedderConfig:
    dim: int = 32
    hidden: int = 64
    n_mels: int = 64
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-3
    epsilon: float = 0.05
    sinkhorn_iters: int = 500
    sinkhorn_tol: float = 1e-8


@dataclass
class JointEmbedder:
    config: EmbedderConfig
    vocab: Vocab
    params: "OrderedDict[str, Tensor]"
    feat_mean: np.ndarray
    feat_std: np.ndarray


def init_embedder(config: EmbedderConfig, vocab: Vocab, rng: np.random.Generator,
                  feat_mean: np.ndarray | None = None,
                  feat_std: np.ndarray | None = None) -> JointEmbedder:
    n_feat = 2 * config.n_mels
    params: OrderedDict[str, Tensor] = OrderedDict()
    init_linear(params, "audio.fc1", n_feat, config.hidden, rng)
    init_linear(params, "audio.fc2", config.hidden, config.hidden, rng)
    init_linear(params, "audio.proj", config.hidden, config.dim, rng)
    params["text.embed"] = Tensor(rng.normal(0.0, 1.0, (len(vocab), config.hidden)), requires_grad=True)
    init_linear(params, "text.proj", config.hidden, config.dim, rng)
    mean = np.zeros(n_feat) if feat_mean is None else feat_mean
    std = np.ones(n_feat) if feat_std is None else feat_std
    return JointEmbedder(config, vocab, params, mean, std)


# ---------------------------------------------------------------------------
# towers


def clip_features(model: JointEmbedder, waveform: np.ndarray, sample_rate: int) -> np.ndarray:
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.size == 0:
        raise ValueError("embed_audio needs a non-empty waveform")
    feats = audio_features(waveform, sample_rate, model.config.n_mels)
    return (feats - model.feat_mean) / model.feat_std


def audio_tower(params, feats: Sequence[np.ndarray]) -> Tensor:
    """Batch of standardized (frames, F) arrays -> (B, dim) unit vectors."""
    n_max = max(len(f) for f in feats)
    x = np.zeros((len(feats), n_max, feats[0].shape[1]))
    pool = np.zeros((len(feats), 1, n_max))
    for i, f in enumerate(feats):
        x[i, : len(f)] = f
        pool[i, 0, : len(f)] = 1.0 / len(f)
    h = T.gelu(linear(params, "audio.fc1", Tensor(x)))
    h = T.gelu(linear(params, "audio.fc2", h))
    pooled = T.matmul(Tensor(pool), h).reshape(len(feats), -1)
    return T.l2_normalize(linear(params, "audio.proj", pooled))


def text_tower(params, token_ids: Sequence[Sequence[int]], vocab_size: int) -> Tensor:
    bag = np.zeros((len(token_ids), vocab_size))
    for i, ids in enumerate(token_ids):
        if not ids:
            raise ValueError("embed_text needs at least one token")
        np.add.at(bag[i], np.asarray(ids), 1.0 / len(ids))
    pooled = T.matmul(Tensor(bag), params["text.embed"])
    return T.l2_normalize(linear(params, "text.proj", pooled))


def embed_audio(model: JointEmbedder, waveform: np.ndarray, sample_rate: int) -> np.ndarray:
    return embed_audio_batch(model, [clip_features(model, waveform, sample_rate)])[0]


def embed_audio_batch(model: JointEmbedder, feats: Sequence[np.ndarray]) -> np.ndarray:
    with no_grad():
        return audio_tower(model.params, feats).data.copy()


def embed_text(model: JointEmbedder, caption: str) -> np.ndarray:
    return embed_text_batch(model, [caption])[0]


def embed_text_batch(model: JointEmbedder, captions: Sequence[str]) -> np.ndarray:
    ids = []
    for c in captions:
        if not tokenize(c):
            raise ValueError("embed_text needs a non-empty caption")
        ids.append(model.vocab.encode(c))
    with no_grad():
        return text_tower(model.params, ids, len(model.vocab)).data.copy()


# ---------------------------------------------------------------------------
# matching loss


def matching_target(groups: Sequence | None, n: int) -> np.ndarray:
    """Ground-truth plan: uniform mass over same-group pairs, rows summing to 1/n."""
    labels = list(range(n)) if groups is None else list(groups)
    same = np.array([[a == b for b in labels] for a in labels], dtype=np.float64)
    return same / same.sum(axis=1, keepdims=True) / n


def mltm_loss(audio_embs, text_embs, epsilon: float = 0.05, groups: Sequence | None = None,
              max_iters: int = 500, tol: float = 1e-8) -> Tensor:
    """Transport-matching loss <Y, C> - OT_eps(C) with C_ij = 1 - cos(a_i, t_j).

    Y is the ground-truth matching plan. OT_eps is the entropic transport
    value; its gradient with respect to C is the Sinkhorn plan, so the plan is
    held constant in the backward pass and the loss gradient is (Y - P*) dC.
    """
    a, t = T.as_tensor(audio_embs), T.as_tensor(text_embs)
    n = a.shape[0]
    if n < 2 or t.shape[0] != n:
        raise ContractError("mltm_loss needs n >= 2 paired rows")
    cost = 1.0 - T.matmul(a, t.transpose(1, 0))
    result = sinkhorn(cost.data, epsilon, max_iters, tol)
    target = matching_target(groups, n)
    entropy_term = result.cost_value - float(np.sum(result.plan * cost.data))
    return T.tsum(cost * (target - result.plan)) - entropy_term


# ---------------------------------------------------------------------------
# training


def _entry_features(model: JointEmbedder, entries: Sequence[ManifestEntry]) -> list[np.ndarray]:
    out = []
    for e in entries:
        wav, sr = read_wav(e.audio_path)
        out.append(audio_features(wav, sr, model.config.n_mels))
    return out


def retrieval_similarity(model: JointEmbedder, feats: Sequence[np.ndarray],
                         entries: Sequence[ManifestEntry]):
    """Text-to-audio similarity over every caption of ``entries``."""
    audio = embed_audio_batch(model, feats)
    queries, qids = [], []
    for e in entries:
        for k, c in enumerate(e.captions):
            queries.append(c)
            qids.append(f"{e.clip_id}#{k}")
    text = embed_text_batch(model, queries)
    relevance = caption_relevance(queries, [e.captions for e in entries])
    return build_similarity(audio, text, [e.clip_id for e in entries], qids, relevance)


def to_checkpoint(model: JointEmbedder, extra_meta: dict | None = None) -> Checkpoint:
    entries = param_arrays(model.params)
    entries["feat.mean"] = model.feat_mean
    entries["feat.std"] = model.feat_std
    meta = {"config": asdict(model.config), "vocab": list(model.vocab.tokens)}
    meta.update(extra_meta or {})
    return Checkpoint(entries=entries, arch=EMBEDDER_ARCH, meta=meta)


def from_checkpoint(ckpt: Checkpoint) -> JointEmbedder:
    if ckpt.arch != EMBEDDER_ARCH:
        raise ContractError(f"expected a {EMBEDDER_ARCH} checkpoint, got {ckpt.arch!r}")
    arrays = OrderedDict(ckpt.entries)
    mean, std = arrays.pop("feat.mean"), arrays.pop("feat.std")
    return JointEmbedder(EmbedderConfig(**ckpt.meta["config"]), Vocab(tuple(ckpt.meta["vocab"])),
                         params_from_arrays(arrays), mean, std)


def train_embedder(entries: Sequence[ManifestEntry], config: EmbedderConfig, seed: int,
                   log_path=None):
    """Minibatch training; returns (best-val checkpoint, per-epoch log records)."""
    train = [e for e in entries if e.split == "train"]
    val = [e for e in entries if e.split == "val"]
    if not train or not val:
        raise ValueError("train_embedder needs non-empty train and val splits")
    rng = np.random.default_rng(seed)
    vocab = Vocab.build(c for e in train for c in e.captions)
    model = init_embedder(config, vocab, rng)
    train_feats = _entry_features(model, train)
    stacked = np.concatenate(train_feats)
    model.feat_mean = stacked.mean(axis=0)
    model.feat_std = stacked.std(axis=0) + 1e-5
    train_feats = [(f - model.feat_mean) / model.feat_std for f in train_feats]
    val_feats = [(f - model.feat_mean) / model.feat_std for f in _entry_features(model, val)]

    pairs = [(i, c) for i, e in enumerate(train) for c in e.captions]
    state: AdamState | None = None
    best_score, best_ckpt, records = -np.inf, None, []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [pairs[j] for j in order[start: start + config.batch_size]]
            if len(batch) < 2:
                continue
            zero_grads(model.params)
            a = audio_tower(model.params, [train_feats[i] for i, _ in batch])
            t = text_tower(model.params, [vocab.encode(c) for _, c in batch], len(vocab))
            groups = [" ".join(tokenize(c)) for _, c in batch]
            loss = mltm_loss(a, t, config.epsilon, groups, config.sinkhorn_iters, config.sinkhorn_tol)
            loss.backward()
            new, state = optimizer_step(param_arrays(model.params), collect_grads(model.params),
                                        state, config.lr)
            for name, arr in new.items():
                model.params[name].data = arr
            losses.append(loss.item())
        score = map_at_10(retrieval_similarity(model, val_feats, val))
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), "val_map10": score}
        records.append(rec)
        log.info("embedder epoch %d loss %.4f val mAP@10 %.4f", epoch, rec["loss"], score)
        if score > best_score:
            best_score = score
            best_ckpt = to_checkpoint(model, {"best_epoch": epoch, "val_map10": score})
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return best_ckpt, records
