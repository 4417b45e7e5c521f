import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=150, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """20/6/6 clips with a K=4, V=16 codec; shared by the integration-style tests."""
    from audiocap.config import load_config
    from audiocap.experiments import prepare_corpus

    cfg = load_config(overrides=["synth.train=20", "synth.val=6", "synth.test=6",
                                 "codec.num_stages=4", "codec.codebook_size=16", "codec.iters=3"])
    return prepare_corpus(tmp_path_factory.mktemp("tiny"), cfg, data_seed=5), cfg


@pytest.fixture(scope="session")
def tiny_models(tiny_corpus):
    """A briefly trained embedder and captioner on the tiny corpus."""
    import dataclasses

    from audiocap import captioner as cap
    from audiocap import embedder as emb
    from audiocap.pipeline import caption_examples, clip_embeddings
    from audiocap.text import Vocab

    corpus, cfg = tiny_corpus
    ckpt, _ = emb.train_embedder(corpus.entries, dataclasses.replace(cfg.embedder, epochs=3), seed=0)
    embedder = emb.from_checkpoint(ckpt)
    train, val = corpus.split("train"), corpus.split("val")
    vocab = Vocab.build(c for e in train for c in e.captions)
    seq = clip_embeddings(embedder, corpus.entries)
    tcfg = cap.CaptionTrainConfig(
        model=cap.CaptionerConfig(num_stages=4, codebook_size=16, embed_dim=embedder.config.dim,
                                  d_model=16, n_heads=2, ff_dim=32),
        pretrain=cap.StageConfig(epochs=2, lr=3e-3, batch_size=8),
        finetune=cap.StageConfig(epochs=1, lr=1e-3, batch_size=8, mcm=cap.McmConfig(enabled=False)),
    )
    tr = caption_examples(train, corpus.layout, vocab, seq)
    va = caption_examples(val, corpus.layout, vocab, seq)
    te = caption_examples(corpus.split("test"), corpus.layout, vocab, seq)
    cap_ckpt, records = cap.train_captioner(tr, va, vocab, tcfg, seed=0)
    return {"embedder": embedder, "captioner": cap.from_checkpoint(cap_ckpt), "ckpt": cap_ckpt,
            "records": records, "train": tr, "val": va, "test": te, "vocab": vocab, "config": tcfg}


SMOKE_INI = """\
[synth]
train = 20
val = 6
test = 6

[codec]
num_stages = 4
codebook_size = 16
iters = 3

[embedder]
epochs = 2

[captioner.pretrain]
epochs = 1

[captioner.finetune]
epochs = 1

[generation]
num_candidates = 5
"""

PIPELINE_STEPS = [
    ["synth"], ["train-codec"], ["encode"], ["train-embed"], ["train-captioner"],
    ["caption"], ["retrieve"], ["eval-retrieval"], ["eval-captions"],
    ["soup", "{out}/captioner.ckpt", "{out}/captioner.ckpt", "--output", "{out}/soup.ckpt"],
    ["ensemble-caption", "--captioner", "{out}/captioner.ckpt", "--captioner", "{out}/soup.ckpt"],
    ["eval-captions", "--prefix", "ensemble_"],
]


def run_cli_pipeline(root, config_path, seed=7):
    """Every subcommand in order on a 20-clip corpus; returns [(step, exit code)]."""
    from audiocap.cli import main

    codes = []
    for step in PIPELINE_STEPS:
        argv = [a.format(out=root) for a in step] + ["--seed", str(seed), "--config", str(config_path),
                                                    "--out", str(root)]
        codes.append((step[0], main(argv)))
    return codes


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    """Two full CLI pipeline runs with the same master seed."""
    base = tmp_path_factory.mktemp("cli")
    ini = base / "smoke.ini"
    ini.write_text(SMOKE_INI)
    roots = [base / "run_a", base / "run_b"]
    return {"config": ini, "roots": roots, "codes": [run_cli_pipeline(r, ini) for r in roots]}


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
