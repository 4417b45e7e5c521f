"""Residual vector quantization codec over DCT frames.

A waveform is cut into non-overlapping ``hop``-sample frames, each frame is
mapped through an orthonormal DCT-II, and K codebooks quantize successive
residuals. Entry 0 of every codebook is the zero vector, so each stage can
always leave the residual untouched.

CodeSequence file layout (little-endian)::

    magic b"RVQC", version u32, sample_rate u32, hop u32, T u32, K u32,
    num_samples u64, then T*K u16 codes in row-major (frame, stage) order.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct, idct

from audiocap.core.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from audiocap.core.optim import ContractError

CODE_RATE_HZ = 75
CODEC_ARCH = "rvq-dct-codec"
_CODES_MAGIC = b"RVQC"
_CODES_VERSION = 1


class DataError(ValueError):
    """Training data cannot support the requested codebook configuration."""


class InvalidInputError(ValueError):
    """Input audio or codes are unusable (empty, wrong rate, ...)."""


def default_hop(sample_rate: int) -> int:
    return int(round(sample_rate / CODE_RATE_HZ))


@dataclass
class CodecConfig:
    num_stages: int = 32
    codebook_size: int = 1024
    iters: int = 10
    max_train_frames: int = 20000


@dataclass
class RvqCodec:
    sample_rate: int
    hop: int
    codebooks: np.ndarray  # (K, V, D)
    train_distortion: list[float] = field(default_factory=list)

    @property
    def num_stages(self) -> int:
        return self.codebooks.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.codebooks.shape[1]

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop


@dataclass
class CodeSequence:
    codes: np.ndarray  # (T, K) int
    sample_rate: int
    hop: int
    num_samples: int

    @property
    def num_frames(self) -> int:
        return self.codes.shape[0]


# ---------------------------------------------------------------------------
# frame transform


def analysis_frames(waveform: np.ndarray, hop: int) -> np.ndarray:
    """Zero-pad to whole frames and apply the orthonormal DCT per frame."""
    x = np.asarray(waveform, dtype=np.float64)
    n_frames = -(-len(x) // hop)
    padded = np.zeros(n_frames * hop)
    padded[: len(x)] = x
    return dct(padded.reshape(n_frames, hop), type=2, norm="ortho", axis=-1)


def synthesis_frames(frames: np.ndarray, num_samples: int) -> np.ndarray:
    return idct(frames, type=2, norm="ortho", axis=-1).reshape(-1)[:num_samples]


# ---------------------------------------------------------------------------
# quantization


def _quantize_step(residual: np.ndarray, codebook: np.ndarray, sq_norms: np.ndarray,
                   energy: np.ndarray | None = None):
    """Nearest codebook row per residual row (lowest index on ties).

    Returns ``(idx, new_residual, new_energy)``. A row falls back to entry 0
    whenever rounding in the expanded distance picked a vector that does not
    actually shrink its residual, so residual energy never increases.
    """
    if energy is None:
        energy = np.einsum("ij,ij->i", residual, residual)
    d2 = sq_norms[None, :] - 2.0 * residual @ codebook.T
    idx = np.argmin(d2, axis=1)
    new = residual - codebook[idx]
    new_energy = np.einsum("ij,ij->i", new, new)
    worse = new_energy > energy
    if worse.any():
        idx[worse] = 0
        new[worse] = residual[worse]
        new_energy[worse] = energy[worse]
    return idx, new, new_energy


def _plus_plus_init(residual: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding that treats the pinned zero entry as an existing center."""
    book = np.zeros((size, residual.shape[1]))
    r_norm = np.einsum("ij,ij->i", residual, residual)
    d2 = r_norm.copy()
    for j in range(1, size):
        total = d2.sum()
        pick = rng.integers(len(residual)) if total <= 0 else rng.choice(len(residual), p=d2 / total)
        book[j] = residual[pick]
        dist = r_norm - 2.0 * (residual @ book[j]) + book[j] @ book[j]
        d2 = np.minimum(d2, np.maximum(dist, 0.0))
    return book


def _kmeans_stage(residual: np.ndarray, size: int, iters: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Lloyd iterations for one stage; row 0 is pinned to the zero vector."""
    book = _plus_plus_init(residual, size, rng)
    r_energy = np.einsum("ij,ij->i", residual, residual)
    for _ in range(iters):
        idx, moved, _ = _quantize_step(residual, book, np.einsum("ij,ij->i", book, book), r_energy)
        assign = np.zeros((size, len(residual)))
        assign[idx, np.arange(len(residual))] = 1.0
        sums = assign @ residual
        counts = np.bincount(idx, minlength=size)
        new = book.copy()
        live = counts > 0
        new[live] = sums[live] / counts[live, None]
        empty = np.flatnonzero(~live)
        empty = empty[empty > 0]
        if len(empty):
            err = np.einsum("ij,ij->i", moved, moved)
            far = np.argsort(-err, kind="stable")
            for slot, src in zip(empty, far):
                if err[src] > 0:
                    new[slot] = residual[src]
        new[0] = 0.0
        if np.array_equal(new, book):
            break
        book = new
    return book


def train_codebooks(frames: np.ndarray, num_stages: int, codebook_size: int, iters: int = 10,
                    seed: int = 0, sample_rate: int = 24000, hop: int | None = None) -> RvqCodec:
    """Fit K codebooks stage by stage with k-means on the running residual.

    ``frames`` are transform-domain vectors (rows of ``analysis_frames``).
    ``codebook_size`` counts the pinned zero entry.
    """
    frames = np.asarray(frames, dtype=np.float64)
    hop = default_hop(sample_rate) if hop is None else hop
    if num_stages < 1 or codebook_size < 2:
        raise ContractError("need num_stages >= 1 and codebook_size >= 2")
    if frames.ndim != 2 or frames.shape[1] != hop:
        raise DataError(f"frames must be (N, {hop}); got {frames.shape}")
    if len(frames) < codebook_size:
        raise DataError(f"need at least {codebook_size} frames, got {len(frames)}")
    rng = np.random.default_rng(seed)
    residual = frames.copy()
    books = np.zeros((num_stages, codebook_size, hop))
    distortion = []
    for s in range(num_stages):
        book = _kmeans_stage(residual, codebook_size, iters, rng)
        _, residual, energy = _quantize_step(residual, book, np.einsum("ij,ij->i", book, book))
        books[s] = book
        distortion.append(float(np.mean(energy) / hop))
    return RvqCodec(sample_rate, hop, books, distortion)


def quantize_frames(codec: RvqCodec, frames: np.ndarray, stages: int | None = None):
    """Return (codes (N, K_used), per-stage residual energy (N, K_used))."""
    stages = codec.num_stages if stages is None else stages
    residual = np.array(frames, dtype=np.float64)
    codes = np.zeros((len(residual), stages), dtype=np.int64)
    energy = np.zeros((len(residual), stages))
    current = None
    for s in range(stages):
        book = codec.codebooks[s]
        codes[:, s], residual, current = _quantize_step(residual, book, np.einsum("ij,ij->i", book, book),
                                                        current)
        energy[:, s] = current
    return codes, energy


def encode(codec: RvqCodec, waveform: np.ndarray, sample_rate: int | None = None,
           stages: int | None = None) -> CodeSequence:
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1 or waveform.size == 0:
        raise InvalidInputError("encode needs a non-empty mono waveform")
    if sample_rate is not None and sample_rate != codec.sample_rate:
        raise InvalidInputError(
            f"waveform is {sample_rate} Hz but codec expects {codec.sample_rate} Hz; resample first"
        )
    codes, _ = quantize_frames(codec, analysis_frames(waveform, codec.hop), stages)
    return CodeSequence(codes, codec.sample_rate, codec.hop, len(waveform))


def decode(codec: RvqCodec, seq: CodeSequence, stages: int | None = None) -> np.ndarray:
    codes = np.asarray(seq.codes)
    k_used = codes.shape[1] if stages is None else min(stages, codes.shape[1])
    if codes.shape[1] > codec.num_stages:
        raise ContractError("code sequence has more stages than the codec")
    if codes.size and (codes.min() < 0 or codes.max() >= codec.codebook_size):
        raise ContractError(f"codes must lie in [0, {codec.codebook_size})")
    frames = np.zeros((codes.shape[0], codec.hop))
    for s in range(k_used):
        frames += codec.codebooks[s][codes[:, s]]
    return synthesis_frames(frames, seq.num_samples)


def quantization_error(codec: RvqCodec, frames: np.ndarray, upto_stage: int) -> float:
    """Mean over frames of squared residual norm / D after ``upto_stage`` stages."""
    if not 1 <= upto_stage <= codec.num_stages:
        raise ContractError(f"upto_stage must lie in [1, {codec.num_stages}]")
    frames = np.asarray(frames, dtype=np.float64).reshape(-1, codec.hop)
    if len(frames) == 0:
        return 0.0
    _, energy = quantize_frames(codec, frames, upto_stage)
    return float(np.mean(energy[:, -1]) / codec.hop)


def resample(waveform: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    if orig_rate == target_rate:
        return np.asarray(waveform, dtype=np.float64)
    from math import gcd

    from scipy.signal import resample_poly

    g = gcd(orig_rate, target_rate)
    return resample_poly(waveform, target_rate // g, orig_rate // g)


# ---------------------------------------------------------------------------
# persistence


def codec_to_checkpoint(codec: RvqCodec) -> Checkpoint:
    entries = OrderedDict((f"codebook.{s}", codec.codebooks[s]) for s in range(codec.num_stages))
    meta = {"sample_rate": codec.sample_rate, "hop": codec.hop,
            "train_distortion": codec.train_distortion, "transform": "dct-ii-ortho"}
    return Checkpoint(entries=entries, arch=CODEC_ARCH, meta=meta)


def codec_from_checkpoint(ckpt: Checkpoint) -> RvqCodec:
    if ckpt.arch != CODEC_ARCH:
        raise ContractError(f"expected a {CODEC_ARCH} checkpoint, got {ckpt.arch!r}")
    k = len(ckpt.entries)
    books = np.stack([ckpt.entries[f"codebook.{s}"] for s in range(k)])
    return RvqCodec(int(ckpt.meta["sample_rate"]), int(ckpt.meta["hop"]), books,
                    list(ckpt.meta.get("train_distortion", [])))


def save_codec(codec: RvqCodec, path) -> None:
    save_checkpoint(codec_to_checkpoint(codec), path)


def load_codec(path) -> RvqCodec:
    return codec_from_checkpoint(load_checkpoint(path))


def codes_to_bytes(seq: CodeSequence) -> bytes:
    t, k = seq.codes.shape
    header = _CODES_MAGIC + struct.pack("<IIIIIQ", _CODES_VERSION, seq.sample_rate, seq.hop, t, k,
                                        seq.num_samples)
    return header + np.asarray(seq.codes, dtype="<u2").tobytes()


def codes_from_bytes(blob: bytes) -> CodeSequence:
    head = len(_CODES_MAGIC) + struct.calcsize("<IIIIIQ")
    if len(blob) < head or blob[:4] != _CODES_MAGIC:
        raise InvalidInputError("not a code-sequence file")
    version, sr, hop, t, k, n = struct.unpack_from("<IIIIIQ", blob, 4)
    if version != _CODES_VERSION:
        raise InvalidInputError(f"unsupported code-sequence version {version}")
    if len(blob) != head + 2 * t * k:
        raise InvalidInputError("code-sequence file is truncated")
    codes = np.frombuffer(blob, dtype="<u2", offset=head).astype(np.int64).reshape(t, k)
    return CodeSequence(codes, sr, hop, n)


def save_codes(seq: CodeSequence, path) -> None:
    Path(path).write_bytes(codes_to_bytes(seq))


def load_codes(path) -> CodeSequence:
    return codes_from_bytes(Path(path).read_bytes())
