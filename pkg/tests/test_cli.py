import json
import os
import subprocess
import sys

import pytest

from audiocap import cli
from audiocap.config import ConfigError, PipelineConfig, load_config, stage_seed


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_defaults_match_documented_values():
    cfg = load_config()
    assert (cfg.generation.top_p, cfg.generation.temperature, cfg.generation.num_candidates) == (0.95, 0.5, 30)
    assert (cfg.rerank.w_enc, cfg.rerank.w_dec) == (0.7, 0.3)
    assert cfg.captioner.pretrain.mcm.enabled and not cfg.captioner.finetune.mcm.enabled
    assert cfg == PipelineConfig()


def test_ini_and_overrides(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[synth]\ntrain = 12\nclip_len_s = 2.0\n\n[captioner.pretrain]\nepochs = 3\n"
                   "mcm_weight = 0.5\n\n[captioner]\nd_model = 32\n\n[generation]\ntop_p = 0.8\n")
    cfg = load_config(ini, ["generation.top_p=0.9", "captioner.finetune.epochs=2", "rerank.w_enc=1.0",
                            "rerank.w_dec=0.0"])
    assert cfg.synth.counts["train"] == 12 and cfg.synth.clip_len_s == 2.0
    assert cfg.captioner.pretrain.epochs == 3 and cfg.captioner.pretrain.mcm.weight == 0.5
    assert cfg.captioner.model.d_model == 32
    assert cfg.generation.top_p == 0.9 and cfg.captioner.finetune.epochs == 2
    assert cfg.rerank.w_enc == 1.0


@pytest.mark.parametrize("text,overrides", [
    ("[nope]\nx = 1\n", []),
    ("[codec]\nnot_a_key = 1\n", []),
    ("[codec]\nnum_stages = many\n", []),
    ("[generation]\ntop_p = 1.5\n", []),
    ("not an ini file", []),
    ("", ["generation.top_p"]),
    ("", ["top_p=0.3"]),
    ("", ["synth.train=-1"]),
])
def test_config_errors(tmp_path, text, overrides):
    ini = tmp_path / "bad.ini"
    ini.write_text(text)
    with pytest.raises(ConfigError):
        load_config(ini, overrides)


def test_stage_seeds_are_distinct_and_stable():
    assert stage_seed(1, "synth") == stage_seed(1, "synth")
    assert len({stage_seed(s, n) for s in range(3) for n in ("synth", "codec", "embedder")}) == 9


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["no-such-command"]) == cli.EXIT_USAGE
    assert cli.main(["synth", "--bogus"]) == cli.EXIT_USAGE
    assert cli.main(["synth", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["synth", "--set", "codec.nope=1", "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["train-codec", "--out", str(tmp_path / "empty")]) == cli.EXIT_MISSING
    assert cli.main(["soup", str(tmp_path / "a.ckpt"), "--output", str(tmp_path / "b.ckpt")]) == cli.EXIT_MISSING
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert cli.main(["soup", str(bad), "--output", str(tmp_path / "b.ckpt")]) == cli.EXIT_FAILURE
    err = capsys.readouterr().err
    assert "config error" in err and "missing input" in err
    assert len({cli.EXIT_USAGE, cli.EXIT_CONFIG, cli.EXIT_MISSING, cli.EXIT_FAILURE}) == 4


def test_synth_twice_gives_identical_trees(tmp_path):
    args = ["synth", "--seed", "1", "--set", "synth.train=4", "--set", "synth.val=2", "--set", "synth.test=2"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b and "data/manifest.jsonl" in a
    assert cli.main(["synth", "--seed", "2", "--set", "synth.train=4", "--set", "synth.val=2", "--set",
                     "synth.test=2", "--out", str(tmp_path / "c")]) == 0
    assert tree(tmp_path / "c") != a


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env_out"))
    assert cli.main(["synth", "--set", "synth.train=2", "--set", "synth.val=1", "--set", "synth.test=1"]) == 0
    assert (tmp_path / "env_out" / "data" / "manifest.jsonl").is_file()


def test_full_pipeline_smoke_run(cli_runs):
    for codes in cli_runs["codes"]:
        assert all(code == 0 for _, code in codes), codes
    root = cli_runs["roots"][0]
    for name in ("codec.ckpt", "embedder.ckpt", "captioner.ckpt", "soup.ckpt", "candidates.jsonl",
                 "rerank.jsonl", "captions.json", "similarity.jsonl", "retrieval_metrics.json",
                 "caption_metrics.json", "ensemble_captions.json", "ensemble_caption_metrics.json"):
        assert (root / name).is_file(), name
    metrics = json.loads((root / "caption_metrics.json").read_text())
    assert metrics["num_clips"] == 6 and metrics["CIDEr-D"] >= 0
    retrieval = json.loads((root / "retrieval_metrics.json").read_text())
    assert 0 <= retrieval["mAP@10"] <= 1
    candidates = (root / "candidates.jsonl").read_text().splitlines()
    assert len(candidates) == 6 * 5
    # a soup of one checkpoint with itself captions exactly like the original
    assert (root / "ensemble_captions.json").read_bytes() == (root / "captions.json").read_bytes()


def test_pipeline_is_byte_reproducible(cli_runs):
    a, b = (tree(r) for r in cli_runs["roots"])
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []


def test_console_entry_point(tmp_path):
    env = dict(os.environ, PYTHONPATH=os.pathsep.join(sys.path))
    out = subprocess.run([sys.executable, "-m", "audiocap.cli", "--help"], capture_output=True, text=True,
                         env=env)
    assert out.returncode == 0 and "ensemble-caption" in out.stdout
