"""Synthetic sound-event corpus with templated captions.

Each clip holds 1-3 non-overlapping events drawn from six kinds. The caption
is a pure function of the event list (``caption_for_events``), so a clip's
caption can always be re-derived and checked.
"""

from __future__ import annotations

import json
import os
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

EVENT_KINDS = ("pure_tone", "chirp", "noise_burst", "am_tone", "click_train", "harmonic_stack")
SAMPLE_RATES = (16000, 24000)
SPLITS = ("train", "val", "test")

LOW_PITCH_HZ = 300.0
HIGH_PITCH_HZ = 1500.0
FAST_CLICK_HZ = 12.0
HISS_CENTER_HZ = 2000.0
BRIEF_S = 0.2
FADE_S = 0.005


class InvalidSpecError(ValueError):
    """An event list cannot be rendered (bounds, Nyquist, overlap, params)."""


class ManifestError(ValueError):
    """A manifest file is missing, malformed, or names an unreadable clip."""


@dataclass(frozen=True)
class SoundEventSpec:
    kind: str
    start_s: float
    duration_s: float
    gain: float = 0.5
    frequency: float | None = None      # tone/fundamental, chirp start, noise center
    end_frequency: float | None = None  # chirp only
    bandwidth: float | None = None      # noise_burst only
    rate: float | None = None           # am_tone modulation, click_train repetition

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class SyntheticClip:
    waveform: np.ndarray
    sample_rate: int
    events: list[SoundEventSpec]
    caption: str


@dataclass(frozen=True)
class ManifestEntry:
    audio_path: str
    captions: tuple[str, ...]
    split: str

    @property
    def clip_id(self) -> str:
        return Path(self.audio_path).stem


@dataclass
class DatasetConfig:
    counts: dict = field(default_factory=lambda: {"train": 200, "val": 50, "test": 50})
    clip_len_s: float = 1.0
    sample_rate: int = 24000
    min_events: int = 1
    max_events: int = 3
    kind_weights: dict = field(default_factory=lambda: {k: 1.0 for k in EVENT_KINDS})


# ---------------------------------------------------------------------------
# template grammar


def _pitch_word(freq: float) -> str | None:
    if freq < LOW_PITCH_HZ:
        return "low"
    if freq >= HIGH_PITCH_HZ:
        return "high"
    return None


def event_phrase(ev: SoundEventSpec) -> list[str]:
    if ev.kind == "pure_tone":
        words = ["a", _pitch_word(ev.frequency), "steady", "tone", "sounds"]
    elif ev.kind == "chirp":
        direction = "rising" if ev.end_frequency > ev.frequency else "falling"
        words = ["a", direction, "chirp", "sweeps"]
    elif ev.kind == "noise_burst":
        verb = "hisses" if ev.frequency >= HISS_CENTER_HZ else "rumbles"
        words = ["a", "burst", "of", "noise", verb]
    elif ev.kind == "am_tone":
        words = ["a", _pitch_word(ev.frequency), "warbling", "tone", "pulses"]
    elif ev.kind == "click_train":
        words = ["a", "fast" if ev.rate >= FAST_CLICK_HZ else "slow", "clicking", "sound", "repeats"]
    elif ev.kind == "harmonic_stack":
        words = ["a", _pitch_word(ev.frequency), "buzzing", "hum", "drones"]
    else:
        raise InvalidSpecError(f"unknown event kind {ev.kind!r}")
    if ev.duration_s < BRIEF_S:
        words.append("briefly")
    return [w for w in words if w is not None]


def caption_for_events(events: Sequence[SoundEventSpec]) -> str:
    if not events:
        return "silence"
    ordered = sorted(events, key=lambda e: e.start_s)
    words: list[str] = []
    for i, ev in enumerate(ordered):
        if i:
            words.append("then")
        words.extend(event_phrase(ev))
    return " ".join(words)


# ---------------------------------------------------------------------------
# rendering


def _validate(events: Sequence[SoundEventSpec], clip_len_s: float, sample_rate: int) -> None:
    if sample_rate not in SAMPLE_RATES:
        raise InvalidSpecError(f"sample_rate must be one of {SAMPLE_RATES}, got {sample_rate}")
    nyquist = sample_rate / 2
    for ev in events:
        if ev.kind not in EVENT_KINDS:
            raise InvalidSpecError(f"unknown event kind {ev.kind!r}")
        if ev.start_s < 0 or ev.duration_s <= 0 or ev.end_s > clip_len_s + 1e-9:
            raise InvalidSpecError(f"{ev.kind} at {ev.start_s}s+{ev.duration_s}s exceeds clip bounds")
        if not 0 < ev.gain <= 1:
            raise InvalidSpecError(f"gain must lie in (0, 1], got {ev.gain}")
        needs = {
            "pure_tone": ("frequency",),
            "chirp": ("frequency", "end_frequency"),
            "noise_burst": ("frequency", "bandwidth"),
            "am_tone": ("frequency", "rate"),
            "click_train": ("rate",),
            "harmonic_stack": ("frequency",),
        }[ev.kind]
        for name in needs:
            value = getattr(ev, name)
            if value is None or value <= 0:
                raise InvalidSpecError(f"{ev.kind} requires a positive {name}")
        top = max(ev.frequency or 0.0, ev.end_frequency or 0.0)
        if ev.kind == "noise_burst":
            top = ev.frequency + ev.bandwidth / 2
        if top >= nyquist:
            raise InvalidSpecError(f"{ev.kind} frequency {top} Hz violates Nyquist ({nyquist} Hz)")
    ordered = sorted(events, key=lambda e: e.start_s)
    for a, b in zip(ordered, ordered[1:]):
        if b.start_s < a.end_s - 1e-9:
            raise InvalidSpecError("events overlap in time")


def _render_event(ev: SoundEventSpec, n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sample_rate
    if ev.kind == "pure_tone":
        sig = np.sin(2 * np.pi * ev.frequency * t)
    elif ev.kind == "chirp":
        slope = (ev.end_frequency - ev.frequency) / ev.duration_s
        sig = np.sin(2 * np.pi * (ev.frequency * t + 0.5 * slope * t * t))
    elif ev.kind == "noise_burst":
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1 / sample_rate)
        spec[np.abs(freqs - ev.frequency) > ev.bandwidth / 2] = 0
        sig = np.fft.irfft(spec, n)
    elif ev.kind == "am_tone":
        envelope = 0.5 * (1 - np.cos(2 * np.pi * ev.rate * t))
        sig = envelope * np.sin(2 * np.pi * ev.frequency * t)
    elif ev.kind == "click_train":
        sig = np.zeros(n)
        click_len = max(1, int(0.002 * sample_rate))
        click = np.exp(-np.arange(click_len) / (click_len / 4))
        for start in (np.arange(0, ev.duration_s, 1 / ev.rate) * sample_rate).astype(int):
            seg = sig[start: start + click_len]
            seg += click[: len(seg)]
    else:  # harmonic_stack
        sig = np.zeros(n)
        h = 1
        while h <= 6 and h * ev.frequency < sample_rate / 2:
            sig += np.sin(2 * np.pi * h * ev.frequency * t) / h
            h += 1
    peak = np.max(np.abs(sig))
    if peak > 0:
        sig = sig / peak
    fade = min(int(FADE_S * sample_rate), n // 2)
    if fade > 0:
        ramp = 0.5 * (1 - np.cos(np.pi * np.arange(fade) / fade))
        sig[:fade] *= ramp
        sig[n - fade:] *= ramp[::-1]
    return ev.gain * sig


def synth_clip(events: Sequence[SoundEventSpec], clip_len_s: float = 1.0,
               sample_rate: int = 24000, seed: int = 0) -> SyntheticClip:
    events = list(events)
    _validate(events, clip_len_s, sample_rate)
    rng = np.random.default_rng(seed)
    n_total = int(round(clip_len_s * sample_rate))
    wav = np.zeros(n_total)
    for ev in sorted(events, key=lambda e: e.start_s):
        i0 = int(round(ev.start_s * sample_rate))
        i1 = min(n_total, int(round(ev.end_s * sample_rate)))
        wav[i0:i1] += _render_event(ev, i1 - i0, sample_rate, rng)
    peak = np.max(np.abs(wav)) if n_total else 0.0
    if peak > 1.0:
        wav /= peak
    return SyntheticClip(wav, sample_rate, events, caption_for_events(events))


# ---------------------------------------------------------------------------
# random event lists


def _sample_event(kind: str, start: float, duration: float, rng: np.random.Generator) -> SoundEventSpec:
    gain = float(rng.uniform(0.3, 1.0))
    pitch_band = [(150.0, 280.0), (350.0, 1000.0), (1700.0, 4000.0)]
    kw: dict = {}
    if kind in ("pure_tone", "am_tone", "harmonic_stack"):
        lo, hi = pitch_band[rng.integers(3)]
        kw["frequency"] = float(rng.uniform(lo, hi))
        if kind == "am_tone":
            kw["rate"] = float(rng.uniform(20.0, 40.0))
    elif kind == "chirp":
        lo, hi = float(rng.uniform(300.0, 700.0)), float(rng.uniform(2000.0, 4000.0))
        kw["frequency"], kw["end_frequency"] = (lo, hi) if rng.random() < 0.5 else (hi, lo)
    elif kind == "noise_burst":
        if rng.random() < 0.5:
            kw["frequency"] = float(rng.uniform(400.0, 900.0))
        else:
            kw["frequency"] = float(rng.uniform(3000.0, 5000.0))
        kw["bandwidth"] = float(rng.uniform(200.0, 600.0))
    elif kind == "click_train":
        kw["rate"] = float(rng.uniform(5.0, 8.0) if rng.random() < 0.5 else rng.uniform(20.0, 35.0))
    return SoundEventSpec(kind=kind, start_s=start, duration_s=duration, gain=gain, **kw)


def sample_events(rng: np.random.Generator, config: DatasetConfig) -> list[SoundEventSpec]:
    kinds = list(config.kind_weights)
    weights = np.array([config.kind_weights[k] for k in kinds], dtype=float)
    weights /= weights.sum()
    n = int(rng.integers(config.min_events, config.max_events + 1))
    slot = config.clip_len_s / max(n, 1)
    events = []
    for i in range(n):
        kind = kinds[rng.choice(len(kinds), p=weights)]
        if rng.random() < 0.3:
            duration = float(rng.uniform(0.12, 0.18))
        else:
            duration = float(rng.uniform(0.22, max(0.22, min(0.3, slot))))
        duration = min(duration, 0.9 * slot)  # short clips: shrink events to fit their slot
        start = i * slot + float(rng.uniform(0.0, slot - duration))
        # floor keeps the rounded event inside its slot
        start, duration = np.floor(start * 1e4) / 1e4, np.floor(duration * 1e4) / 1e4
        events.append(_sample_event(kind, float(start), float(duration), rng))
    return events


# ---------------------------------------------------------------------------
# files


def write_wav(path, waveform: np.ndarray, sample_rate: int) -> None:
    pcm = np.round(np.clip(waveform, -1.0, 1.0) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        sr = w.getframerate()
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, sr


def build_dataset(config: DatasetConfig, seed: int, out_dir) -> Path:
    """Render every split to ``out_dir/audio`` and write ``out_dir/manifest.jsonl``."""
    out = Path(out_dir)
    audio_dir = out / "audio"
    try:
        audio_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(audio_dir, os.W_OK):
        raise OSError(f"output directory {audio_dir} is not writable")
    root = np.random.SeedSequence(seed)
    lines = []
    for split, split_seq in zip(SPLITS, root.spawn(len(SPLITS))):
        count = int(config.counts.get(split, 0))
        for idx, clip_seq in enumerate(split_seq.spawn(count)):
            rng = np.random.default_rng(clip_seq)
            events = sample_events(rng, config)
            clip = synth_clip(events, config.clip_len_s, config.sample_rate,
                              seed=int(rng.integers(2**31)))
            rel = f"audio/{split}_{idx:04d}.wav"
            write_wav(out / rel, clip.waveform, clip.sample_rate)
            lines.append(json.dumps({"audio_path": rel, "captions": [clip.caption], "split": split}))
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return manifest


def load_manifest(path, check_files: bool = True) -> list[ManifestEntry]:
    """Parse a JSONL manifest; audio paths are resolved against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    entries = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            for key in ("audio_path", "captions", "split"):
                if key not in obj:
                    raise ManifestError(f"{path}:{lineno}: missing field {key!r}")
            caps = obj["captions"]
            if (not isinstance(caps, list) or not 1 <= len(caps) <= 5
                    or not all(isinstance(c, str) for c in caps)):
                raise ManifestError(f"{path}:{lineno}: 'captions' must be a list of 1-5 strings")
            if obj["split"] not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {obj['split']!r}")
            audio = (path.parent / obj["audio_path"]).resolve()
            if check_files and not audio.is_file():
                raise ManifestError(f"{path}:{lineno}: audio file not found: {audio}")
            entries.append(ManifestEntry(str(audio), tuple(caps), obj["split"]))
    return entries


def split_entries(entries: Sequence[ManifestEntry], split: str) -> list[ManifestEntry]:
    return [e for e in entries if e.split == split]
