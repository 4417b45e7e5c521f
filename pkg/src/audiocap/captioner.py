"""Codec-token captioner: transformer encoder over RVQ frames, autoregressive decoder.

Encoder input is one prefix position holding the projected sequence-level
embedding, followed by one position per code frame whose vector is the sum of
the K per-stage code embeddings. Row V of every stage table is the mask token
used by masked codec modeling (MCM); ``encode`` never produces it.
"""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from audiocap.codec import CodeSequence
from audiocap.core import tensor as T
from audiocap.core.checkpoint import Checkpoint
from audiocap.core.nn import (attention, causal_mask, collect_grads, init_attention,
                              init_layer_norm, init_linear, init_mlp, layer_norm, linear, mlp,
                              param_arrays, params_from_arrays, zero_grads)
from audiocap.core.optim import AdamState, ContractError, optimizer_step
from audiocap.core.tensor import Tensor, no_grad
from audiocap.text import Vocab

log = logging.getLogger(__name__)

CAPTIONER_ARCH = "codec-captioner-v1"


@dataclass
class CaptionerConfig:
    num_stages: int = 8
    codebook_size: int = 64
    embed_dim: int = 32
    d_model: int = 48
    n_heads: int = 2
    ff_dim: int = 96
    enc_layers: int = 1
    dec_layers: int = 1
    max_frames: int = 128
    max_len: int = 24


@dataclass
class McmConfig:
    enabled: bool = True
    mask_rate: float = 0.15
    masked_stages: int = 4
    weight: float = 0.3


@dataclass
class StageConfig:
    epochs: int = 40
    lr: float = 2e-3
    batch_size: int = 16
    mcm: McmConfig = field(default_factory=McmConfig)


@dataclass
class CaptionTrainConfig:
    model: CaptionerConfig = field(default_factory=CaptionerConfig)
    pretrain: StageConfig = field(default_factory=StageConfig)
    finetune: StageConfig = field(
        default_factory=lambda: StageConfig(epochs=20, lr=5e-4, mcm=McmConfig(enabled=False))
    )


@dataclass
class CaptionModel:
    config: CaptionerConfig
    vocab: Vocab
    params: "OrderedDict[str, Tensor]"

    def encode(self, codes: np.ndarray, seq_emb: np.ndarray) -> np.ndarray:
        """Encoder states for one clip, shape (1, T + 1, d)."""
        with no_grad():
            return encoder_forward(self.params, self.config, codes[None], seq_emb[None]).data

    def next_logprobs(self, memory: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
        """Next-token log-probabilities for each row of ``prefixes`` (n, L)."""
        prefixes = np.asarray(prefixes, dtype=np.int64)
        if prefixes.shape[1] > self.config.max_len:
            raise ContractError(f"prefix longer than max_len={self.config.max_len}")
        mem = np.repeat(memory, len(prefixes), axis=0)
        with no_grad():
            out = decoder_forward(self.params, self.config, Tensor(mem), prefixes)
        return out.data[:, -1, :].copy()


def init_captioner(config: CaptionerConfig, vocab: Vocab, rng: np.random.Generator) -> CaptionModel:
    d = config.d_model
    if d % config.n_heads:
        raise ContractError("d_model must be divisible by n_heads")
    p: OrderedDict[str, Tensor] = OrderedDict()
    p["code_embed"] = Tensor(
        rng.normal(0.0, 1.0 / np.sqrt(config.num_stages), (config.num_stages, config.codebook_size + 1, d)),
        requires_grad=True)
    init_linear(p, "prefix", config.embed_dim, d, rng)
    p["enc_pos"] = Tensor(rng.normal(0.0, 0.1, (config.max_frames + 1, d)), requires_grad=True)
    for i in range(config.enc_layers):
        init_layer_norm(p, f"enc.{i}.ln1", d)
        init_attention(p, f"enc.{i}.attn", d, rng)
        init_layer_norm(p, f"enc.{i}.ln2", d)
        init_mlp(p, f"enc.{i}.mlp", d, config.ff_dim, rng)
    init_layer_norm(p, "enc.ln_out", d)
    p["tok_embed"] = Tensor(rng.normal(0.0, 1.0, (len(vocab), d)), requires_grad=True)
    p["dec_pos"] = Tensor(rng.normal(0.0, 0.1, (config.max_len, d)), requires_grad=True)
    for i in range(config.dec_layers):
        init_layer_norm(p, f"dec.{i}.ln1", d)
        init_attention(p, f"dec.{i}.self", d, rng)
        init_layer_norm(p, f"dec.{i}.ln2", d)
        init_attention(p, f"dec.{i}.cross", d, rng)
        init_layer_norm(p, f"dec.{i}.ln3", d)
        init_mlp(p, f"dec.{i}.mlp", d, config.ff_dim, rng)
    init_layer_norm(p, "dec.ln_out", d)
    init_linear(p, "out", d, len(vocab), rng, zero=True)
    for s in range(config.num_stages):
        init_linear(p, f"mcm.{s}", d, config.codebook_size, rng, zero=True)
    return CaptionModel(config, vocab, p)


# ---------------------------------------------------------------------------
# forward passes (pure functions of the parameter dict)


def encoder_forward(params, cfg: CaptionerConfig, codes: np.ndarray, seq_emb: np.ndarray) -> Tensor:
    """codes (B, T, K) ints in [0, V] (V = mask), seq_emb (B, embed_dim) -> (B, T+1, d)."""
    codes = np.asarray(codes, dtype=np.int64)
    b, t, k = codes.shape
    if k != cfg.num_stages:
        raise ContractError(f"expected {cfg.num_stages} code stages, got {k}")
    if t > cfg.max_frames:
        raise ContractError(f"{t} frames exceed max_frames={cfg.max_frames}")
    if codes.min() < 0 or codes.max() > cfg.codebook_size:
        raise ContractError("code index out of range")
    rows = cfg.codebook_size + 1
    table = params["code_embed"].reshape(k * rows, cfg.d_model)
    flat_ids = codes + rows * np.arange(k)[None, None, :]
    frames = T.take_rows(table, flat_ids).sum(axis=2)
    prefix = linear(params, "prefix", Tensor(np.asarray(seq_emb, dtype=np.float64))).reshape(b, 1, -1)
    x = T.concat([prefix, frames], axis=1) + params["enc_pos"][: t + 1]
    for i in range(cfg.enc_layers):
        h = layer_norm(params, f"enc.{i}.ln1", x)
        x = x + attention(params, f"enc.{i}.attn", h, h, cfg.n_heads)
        x = x + mlp(params, f"enc.{i}.mlp", layer_norm(params, f"enc.{i}.ln2", x))
    return layer_norm(params, "enc.ln_out", x)


def decoder_forward(params, cfg: CaptionerConfig, memory: Tensor, tokens: np.ndarray) -> Tensor:
    """tokens (B, L) decoder inputs (start-prefixed) -> (B, L, vocab) log-probabilities."""
    tokens = np.asarray(tokens, dtype=np.int64)
    length = tokens.shape[1]
    if length > cfg.max_len:
        raise ContractError(f"decoder input longer than max_len={cfg.max_len}")
    x = T.take_rows(params["tok_embed"], tokens) + params["dec_pos"][:length]
    mask = causal_mask(length)
    for i in range(cfg.dec_layers):
        h = layer_norm(params, f"dec.{i}.ln1", x)
        x = x + attention(params, f"dec.{i}.self", h, h, cfg.n_heads, mask)
        x = x + attention(params, f"dec.{i}.cross", layer_norm(params, f"dec.{i}.ln2", x), memory,
                          cfg.n_heads)
        x = x + mlp(params, f"dec.{i}.mlp", layer_norm(params, f"dec.{i}.ln3", x))
    return T.log_softmax(linear(params, "out", layer_norm(params, "dec.ln_out", x)), axis=-1)


def mcm_logprobs(params, cfg: CaptionerConfig, memory: Tensor, stages: int) -> list[Tensor]:
    frames = memory[:, 1:, :]
    return [T.log_softmax(linear(params, f"mcm.{s}", frames), axis=-1) for s in range(stages)]


# ---------------------------------------------------------------------------
# masking


@dataclass
class McmMask:
    codes: np.ndarray      # (T, K) with masked entries set to V
    positions: np.ndarray  # masked frame indices
    targets: np.ndarray    # (len(positions), C_m) original codes


def mcm_mask(codes: np.ndarray, config: McmConfig, codebook_size: int,
             rng: np.random.Generator | int) -> McmMask:
    """Mask whole frames independently with probability ``mask_rate``."""
    if not 0.0 <= config.mask_rate <= 1.0:
        raise ContractError("mask_rate must lie in [0, 1]")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    codes = np.asarray(codes, dtype=np.int64)
    stages = min(config.masked_stages, codes.shape[1])
    hit = rng.random(codes.shape[0]) < config.mask_rate
    positions = np.flatnonzero(hit)
    targets = codes[positions, :stages].copy()
    masked = codes.copy()
    masked[positions, :stages] = codebook_size
    return McmMask(masked, positions, targets)


# ---------------------------------------------------------------------------
# likelihoods


def _check_tokens(model: CaptionModel, tokens: Sequence[int]) -> np.ndarray:
    ids = np.asarray(list(tokens), dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= len(model.vocab)):
        raise ContractError("caption token id outside the vocabulary")
    if len(ids) + 1 > model.config.max_len:
        raise ContractError(f"caption longer than max_len={model.config.max_len}")
    return ids


def forward_loglik(model: CaptionModel, codes: CodeSequence | np.ndarray, seq_emb: np.ndarray,
                   tokens: Sequence[int]):
    """Teacher-forced log-likelihood of ``tokens`` followed by the end token.

    Returns ``(total, per_token)``; ``tokens`` excludes start and end markers.
    """
    codes = codes.codes if isinstance(codes, CodeSequence) else np.asarray(codes)
    body = _check_tokens(model, tokens)
    inputs = np.concatenate([[model.vocab.start_id], body])[None]
    targets = np.concatenate([body, [model.vocab.end_id]])
    with no_grad():
        memory = encoder_forward(model.params, model.config, codes[None], np.asarray(seq_emb)[None])
        lp = decoder_forward(model.params, model.config, memory, inputs).data[0]
    per_token = lp[np.arange(len(targets)), targets]
    return float(per_token.sum()), per_token


def next_token_logprobs(model: CaptionModel, codes: CodeSequence | np.ndarray, seq_emb: np.ndarray,
                        prefix: Sequence[int]) -> np.ndarray:
    codes = codes.codes if isinstance(codes, CodeSequence) else np.asarray(codes)
    prefix = list(prefix)
    if not prefix or prefix[0] != model.vocab.start_id:
        raise ContractError("prefix must begin with the start token")
    return model.next_logprobs(model.encode(codes, np.asarray(seq_emb)), np.asarray([prefix]))[0]


# ---------------------------------------------------------------------------
# training


@dataclass
class CaptionExample:
    clip_id: str
    codes: np.ndarray   # (T, K)
    seq_emb: np.ndarray
    tokens: np.ndarray  # caption body ids


def _pad_batch(examples: Sequence[CaptionExample], vocab: Vocab):
    length = max(len(e.tokens) for e in examples) + 1
    inputs = np.full((len(examples), length), vocab.end_id, dtype=np.int64)
    targets = np.full((len(examples), length), vocab.end_id, dtype=np.int64)
    weights = np.zeros((len(examples), length))
    for i, e in enumerate(examples):
        n = len(e.tokens)
        inputs[i, 0] = vocab.start_id
        inputs[i, 1: n + 1] = e.tokens
        targets[i, :n] = e.tokens
        targets[i, n] = vocab.end_id
        weights[i, : n + 1] = 1.0
    return inputs, targets, weights


def _gather(lp: Tensor, targets: np.ndarray) -> Tensor:
    b, length = targets.shape
    onehot = np.zeros(lp.shape)
    onehot[np.arange(b)[:, None], np.arange(length)[None, :], targets] = 1.0
    return (lp * onehot).sum(axis=-1)


def caption_loss(params, cfg: CaptionerConfig, vocab: Vocab, examples: Sequence[CaptionExample],
                 masks: Sequence[McmMask] | None = None, mcm_weight: float = 0.0):
    """Returns (total loss Tensor, caption CE float, MCM CE float or None)."""
    codes = np.stack([e.codes for e in examples])
    emb = np.stack([e.seq_emb for e in examples])
    inputs, targets, weights = _pad_batch(examples, vocab)
    memory = encoder_forward(params, cfg, codes, emb)
    lp = decoder_forward(params, cfg, memory, inputs)
    ce_caption = -(_gather(lp, targets) * weights).sum() * (1.0 / weights.sum())
    total = ce_caption
    ce_mcm_value = None
    if masks is not None:
        stages = masks[0].targets.shape[1] if masks else 0
        n_targets = sum(m.targets.size for m in masks)
        masked_mem = encoder_forward(params, cfg, np.stack([m.codes for m in masks]), emb)
        if n_targets and stages:
            heads = mcm_logprobs(params, cfg, masked_mem, stages)
            ce_mcm = None
            for s, head in enumerate(heads):
                pick = np.zeros(head.shape)
                for i, m in enumerate(masks):
                    pick[i, m.positions, m.targets[:, s]] = 1.0
                term = (head * pick).sum()
                ce_mcm = term if ce_mcm is None else ce_mcm + term
            ce_mcm = ce_mcm * (-1.0 / n_targets)
            ce_mcm_value = ce_mcm.item()
            total = total + ce_mcm * mcm_weight
        else:
            ce_mcm_value = 0.0
    return total, ce_caption.item(), ce_mcm_value


def mean_val_loglik(model: CaptionModel, examples: Sequence[CaptionExample], batch_size: int = 32) -> float:
    totals = []
    with no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start: start + batch_size]
            inputs, targets, weights = _pad_batch(chunk, model.vocab)
            memory = encoder_forward(model.params, model.config, np.stack([e.codes for e in chunk]),
                                     np.stack([e.seq_emb for e in chunk]))
            lp = decoder_forward(model.params, model.config, memory, inputs).data
            picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
            totals.extend((picked * weights).sum(axis=1))
    return float(np.mean(totals))


def masked_code_ce(model: CaptionModel, examples: Sequence[CaptionExample], mcm: McmConfig,
                   seed: int) -> tuple[float, float]:
    """(mean CE, accuracy) of the MCM heads on freshly masked ``examples``."""
    rng = np.random.default_rng(seed)
    cfg = model.config
    losses, hits, count = 0.0, 0, 0
    with no_grad():
        for e in examples:
            m = mcm_mask(e.codes, McmConfig(True, mcm.mask_rate, mcm.masked_stages, mcm.weight),
                         cfg.codebook_size, rng)
            if not m.positions.size:
                continue
            mem = encoder_forward(model.params, cfg, m.codes[None], e.seq_emb[None])
            for s, head in enumerate(mcm_logprobs(model.params, cfg, mem, m.targets.shape[1])):
                lp = head.data[0, m.positions]
                losses -= lp[np.arange(len(m.positions)), m.targets[:, s]].sum()
                hits += int((lp.argmax(axis=1) == m.targets[:, s]).sum())
                count += len(m.positions)
    if count == 0:
        return float("nan"), float("nan")
    return losses / count, hits / count


def _run_stage(model: CaptionModel, name: str, stage: StageConfig, train: Sequence[CaptionExample],
               val: Sequence[CaptionExample], rng: np.random.Generator,
               mask_rng: np.random.Generator, records: list):
    state: AdamState | None = None
    best = (mean_val_loglik(model, val), param_arrays(model.params))
    for epoch in range(1, stage.epochs + 1):
        order = rng.permutation(len(train))
        ce_caps, ce_mcms = [], []
        for start in range(0, len(order), stage.batch_size):
            batch = [train[j] for j in order[start: start + stage.batch_size]]
            masks = None
            if stage.mcm.enabled:
                masks = [mcm_mask(e.codes, stage.mcm, model.config.codebook_size, mask_rng) for e in batch]
            zero_grads(model.params)
            loss, ce_cap, ce_mcm = caption_loss(model.params, model.config, model.vocab, batch, masks,
                                                stage.mcm.weight if stage.mcm.enabled else 0.0)
            loss.backward()
            new, state = optimizer_step(param_arrays(model.params), collect_grads(model.params), state,
                                        stage.lr)
            for key, arr in new.items():
                model.params[key].data = arr
            ce_caps.append(ce_cap)
            if ce_mcm is not None:
                ce_mcms.append(ce_mcm)
        val_ll = mean_val_loglik(model, val)
        rec = {"stage": name, "epoch": epoch, "ce_caption": float(np.mean(ce_caps)),
               "ce_mcm": float(np.mean(ce_mcms)) if stage.mcm.enabled else None,
               "val_loglik": val_ll}
        records.append(rec)
        log.info("captioner %s epoch %d ce %.4f mcm %s val_ll %.4f", name, epoch, rec["ce_caption"],
                 rec["ce_mcm"], val_ll)
        if val_ll > best[0]:
            best = (val_ll, param_arrays(model.params))
    for key, arr in best[1].items():
        model.params[key].data = arr
    return best[0]


def train_captioner(train: Sequence[CaptionExample], val: Sequence[CaptionExample], vocab: Vocab,
                    config: CaptionTrainConfig, seed: int, stages: Sequence[str] = ("pretrain", "finetune"),
                    init: CaptionModel | None = None, log_path=None):
    """Run the requested stages in order; returns (best-val checkpoint, log records)."""
    for name in stages:
        mcm = getattr(config, name).mcm
        # a zero weight is allowed: it must reproduce the MCM-off trajectory exactly
        if mcm.enabled and mcm.weight < 0:
            raise ContractError(f"{name}: MCM enabled with negative weight {mcm.weight}")
    if not train or not val:
        raise ValueError("train_captioner needs non-empty train and val sets")
    root = np.random.SeedSequence(seed)
    init_seq, order_seq, mask_seq = root.spawn(3)
    model = init or init_captioner(config.model, vocab, np.random.default_rng(init_seq))
    rng = np.random.default_rng(order_seq)
    mask_rng = np.random.default_rng(mask_seq)
    records: list[dict] = []
    best = None
    for name in stages:
        best = _run_stage(model, name, getattr(config, name), train, val, rng, mask_rng, records)
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return to_checkpoint(model, {"val_loglik": best}), records


def to_checkpoint(model: CaptionModel, extra_meta: dict | None = None) -> Checkpoint:
    meta = {"config": asdict(model.config), "vocab": list(model.vocab.tokens)}
    meta.update(extra_meta or {})
    return Checkpoint(entries=param_arrays(model.params), arch=CAPTIONER_ARCH, meta=meta)


def from_checkpoint(ckpt: Checkpoint) -> CaptionModel:
    if ckpt.arch != CAPTIONER_ARCH:
        raise ContractError(f"expected a {CAPTIONER_ARCH} checkpoint, got {ckpt.arch!r}")
    return CaptionModel(CaptionerConfig(**ckpt.meta["config"]), Vocab(tuple(ckpt.meta["vocab"])),
                        params_from_arrays(ckpt.entries))
