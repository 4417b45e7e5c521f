"""Log-mel front end for the embedder's audio tower."""

from __future__ import annotations

import numpy as np


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float = 50.0,
                   fmax: float | None = None) -> np.ndarray:
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lower) / (center - lower)
    down = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(up, down))


def log_mel(waveform: np.ndarray, sample_rate: int, n_mels: int = 64,
            frame_rate: float = 100.0, n_fft: int = 512) -> np.ndarray:
    """(frames, n_mels) log-mel energies of the peak-normalized waveform."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty waveform")
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x / peak
    hop = int(round(sample_rate / frame_rate))
    n_frames = max(1, -(-len(x) // hop))
    padded = np.zeros((n_frames - 1) * hop + n_fft)
    start = n_fft // 2 - hop // 2
    padded[start: start + len(x)] = x[: len(padded) - start]
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    spec = np.abs(np.fft.rfft(padded[idx] * np.hanning(n_fft), axis=-1)) ** 2
    return np.log(spec @ mel_filterbank(sample_rate, n_fft, n_mels).T + 1e-6)


def deltas(feats: np.ndarray) -> np.ndarray:
    padded = np.pad(feats, ((1, 1), (0, 0)), mode="edge")
    return 0.5 * (padded[2:] - padded[:-2])


def audio_features(waveform: np.ndarray, sample_rate: int, n_mels: int = 64) -> np.ndarray:
    """Log-mel frames with first-order deltas appended: (frames, 2 * n_mels)."""
    mel = log_mel(waveform, sample_rate, n_mels)
    return np.concatenate([mel, deltas(mel)], axis=1)
