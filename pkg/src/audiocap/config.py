"""Pipeline configuration: one INI file with a section per stage.

Example::

    [synth]
    train = 200
    val = 50
    test = 50

    [codec]
    num_stages = 8
    codebook_size = 64

    [captioner.pretrain]
    epochs = 40
    mcm_weight = 0.3

Keys map onto dataclass fields; the MCM block of a captioner stage uses the
``mcm_`` prefix. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from audiocap.captioner import CaptionerConfig, CaptionTrainConfig, McmConfig, StageConfig
from audiocap.codec import CodecConfig
from audiocap.decoding import GenerationConfig
from audiocap.embedder import EmbedderConfig
from audiocap.rerank import RerankConfig
from audiocap.synthdata import SPLITS, DatasetConfig


class ConfigError(ValueError):
    """Unreadable config file or bad key/value."""


@dataclass
class PipelineConfig:
    synth: DatasetConfig = field(default_factory=DatasetConfig)
    # desk-scale codec; the captioner's code vocabulary follows whatever is trained here
    codec: CodecConfig = field(default_factory=lambda: CodecConfig(num_stages=8, codebook_size=64))
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    captioner: CaptionTrainConfig = field(default_factory=CaptionTrainConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)


def stage_seed(master: int, stage: str) -> int:
    """Independent 32-bit seed for one pipeline stage, derived from the master seed."""
    seq = np.random.SeedSequence([int(master), zlib.crc32(stage.encode("utf-8"))])
    return int(seq.generate_state(1)[0])


def _coerce(raw: str, current: Any, where: str):
    try:
        if isinstance(current, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(current).__name__}") from exc
    return raw


def _set_fields(obj, values: dict[str, str], section: str):
    """Return a copy of dataclass ``obj`` with ``values`` applied (validation re-runs)."""
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in values.items():
        if key not in names or dataclasses.is_dataclass(getattr(obj, key)) or isinstance(getattr(obj, key), dict):
            raise ConfigError(f"[{section}] unknown key {key!r}")
        updates[key] = _coerce(raw, getattr(obj, key), f"[{section}] {key}")
    try:
        return dataclasses.replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _apply_synth(cfg: DatasetConfig, values: dict[str, str]) -> DatasetConfig:
    counts = dict(cfg.counts)
    rest = {}
    for key, raw in values.items():
        if key in SPLITS:
            counts[key] = _coerce(raw, 0, f"[synth] {key}")
            if counts[key] < 0:
                raise ConfigError(f"[synth] {key} must be >= 0")
        else:
            rest[key] = raw
    return dataclasses.replace(_set_fields(cfg, rest, "synth"), counts=counts)


def _apply_stage(stage: StageConfig, values: dict[str, str], section: str) -> StageConfig:
    mcm_vals = {k[4:]: v for k, v in values.items() if k.startswith("mcm_")}
    plain = {k: v for k, v in values.items() if not k.startswith("mcm_")}
    mcm = _set_fields(stage.mcm, mcm_vals, section)
    return dataclasses.replace(_set_fields(stage, plain, section), mcm=mcm)


def apply_section(cfg: PipelineConfig, section: str, values: dict[str, str]) -> PipelineConfig:
    if not values:
        return cfg
    if section == "synth":
        return dataclasses.replace(cfg, synth=_apply_synth(cfg.synth, values))
    if section in ("codec", "embedder", "generation", "rerank"):
        return dataclasses.replace(cfg, **{section: _set_fields(getattr(cfg, section), values, section)})
    if section == "captioner":
        model = _set_fields(cfg.captioner.model, values, section)
        return dataclasses.replace(cfg, captioner=dataclasses.replace(cfg.captioner, model=model))
    if section in ("captioner.pretrain", "captioner.finetune"):
        name = section.split(".")[1]
        stage = _apply_stage(getattr(cfg.captioner, name), values, section)
        return dataclasses.replace(cfg, captioner=dataclasses.replace(cfg.captioner, **{name: stage}))
    raise ConfigError(f"unknown config section [{section}]")


def load_config(path=None, overrides: list[str] | tuple[str, ...] = ()) -> PipelineConfig:
    """Defaults, then the INI file (if any), then ``section.key=value`` overrides.

    File values and overrides are merged per section before validation, so
    coupled fields (the two rerank weights) can be changed together.
    """
    sections: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            text = Path(path).read_text(encoding="utf-8")
            parser.read_string(text, source=str(path))
        except (OSError, UnicodeDecodeError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            sections[section] = dict(parser.items(section))
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().rpartition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        sections.setdefault(section, {})[name] = value.strip()
    cfg = PipelineConfig()
    for section, values in sections.items():
        cfg = apply_section(cfg, section, values)
    return cfg


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


__all__ = [
    "CaptionTrainConfig", "CaptionerConfig", "ConfigError", "McmConfig", "PipelineConfig",
    "StageConfig", "apply_section", "config_to_dict", "load_config", "stage_seed",
]
