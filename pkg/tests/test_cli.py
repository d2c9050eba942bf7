import json
import subprocess
import sys

import numpy as np
import pytest
from scipy.io import wavfile

from dssep import cli
from dssep.checkpoint import save_model
from dssep.model import ModelConfig, identity_weights, init_weights
from dssep.signals import read_wav, write_wav

TINY_MODEL = {"channels": 8, "blocks": 1, "heads": 2, "reduced": True}


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def identity_ckpt(tmp_path):
    cfg = ModelConfig(**TINY_MODEL)
    path = tmp_path / "identity.dssf"
    save_model(path, cfg, identity_weights(cfg))
    return path


@pytest.fixture
def mixture_wav(tmp_path):
    x = 0.3 * np.sin(np.arange(80000) * 0.05) * np.random.default_rng(0).uniform(0.5, 1, 80000)
    path = tmp_path / "in.wav"
    write_wav(path, x)
    return path


def _write_config(path, model=None, train=None, **extra):
    body = {"model": model or TINY_MODEL, "train": train or {}}
    body.update(extra)
    path.write_text(json.dumps(body))
    return path


# --------------------------------------------------------------------------
# separate


def test_separate_identity_checkpoint(capsys, tmp_path, identity_ckpt, mixture_wav):
    near, far = tmp_path / "n.wav", tmp_path / "f.wav"
    code, out, _ = _run(capsys, "separate", "--input", mixture_wav, "--ckpt", identity_ckpt,
                        "--out-near", near, "--out-far", far)
    assert code == 0 and "5.00 s" in out and "rtf" in out
    x, yn, yf = read_wav(mixture_wav), read_wav(near), read_wav(far)
    assert yn.shape == yf.shape == x.shape == (80000,)
    assert np.max(np.abs(yn + yf - x)) < 1e-3


def test_separate_missing_checkpoint(capsys, tmp_path, mixture_wav):
    missing = tmp_path / "nope.dssf"
    code, _, err = _run(capsys, "separate", "--input", mixture_wav, "--ckpt", missing,
                        "--out-near", tmp_path / "n.wav", "--out-far", tmp_path / "f.wav")
    assert code == 3 and str(missing) in err


def test_separate_wrong_rate(capsys, tmp_path, identity_ckpt):
    path = tmp_path / "44k.wav"
    wavfile.write(str(path), 44100, np.zeros(44100, np.float32))
    code, _, err = _run(capsys, "separate", "--input", path, "--ckpt", identity_ckpt,
                        "--out-near", tmp_path / "n.wav", "--out-far", tmp_path / "f.wav")
    assert code == 3 and "44100" in err


def test_separate_nan_output_fails_loudly(capsys, tmp_path, mixture_wav):
    cfg = ModelConfig(**TINY_MODEL)
    w = init_weights(cfg)
    w["dec.near.mask.out.b"][:] = np.nan
    ckpt = tmp_path / "nan.dssf"
    save_model(ckpt, cfg, w)
    code, _, err = _run(capsys, "separate", "--input", mixture_wav, "--ckpt", ckpt,
                        "--out-near", tmp_path / "n.wav", "--out-far", tmp_path / "f.wav")
    assert code == 4 and "non-finite" in err
    assert not (tmp_path / "n.wav").exists()


# --------------------------------------------------------------------------
# configuration errors


def test_unknown_config_key(capsys, tmp_path, corpus_1x1):
    cfg = _write_config(tmp_path / "c.json", extra_section={})
    code, _, err = _run(capsys, "train", "--config", cfg, "--manifest", corpus_1x1, "--out", tmp_path / "r")
    assert code == 2 and "'extra_section'" in err
    cfg = _write_config(tmp_path / "c.json", model=dict(TINY_MODEL, chanels=8))
    code, _, err = _run(capsys, "train", "--config", cfg, "--manifest", corpus_1x1, "--out", tmp_path / "r")
    assert code == 2 and "chanels" in err
    (tmp_path / "bad.json").write_text("{")
    code, _, err = _run(capsys, "train", "--config", tmp_path / "bad.json", "--manifest", corpus_1x1,
                        "--out", tmp_path / "r")
    assert code == 2 and "JSON" in err


def test_bad_arguments(capsys, tmp_path, corpus_1x1):
    assert _run(capsys, "--log-level", "LOUD", "simulate", "--count", 1, "--out", tmp_path)[0] == 2
    code, _, err = _run(capsys, "simulate", "--count", 1, "--out", tmp_path, "--ratio", "70:20")
    assert code == 2
    code, _, err = _run(capsys, "evaluate", "--manifest", corpus_1x1, "--out", tmp_path / "r.json")
    assert code == 2 and "--ckpt" in err
    code, _, err = _run(capsys, "evaluate", "--identity", "--manifest", corpus_1x1, "--bands", "XX",
                        "--out", tmp_path / "r.json")
    assert code == 2 and "--bands" in err
    code, _, err = _run(capsys, "train", "--config", tmp_path / "none.json", "--manifest", corpus_1x1,
                        "--out", tmp_path / "r")
    assert code == 2 and "none.json" in err


def test_missing_manifest_is_a_data_error(capsys, tmp_path):
    cfg = _write_config(tmp_path / "c.json")
    code, _, err = _run(capsys, "train", "--config", cfg, "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "r")
    assert code == 3 and "m.jsonl" in err


# --------------------------------------------------------------------------
# determinism of the file-producing subcommands


def _tree_bytes(root, suffixes=(".wav", ".jsonl", ".json", ".dssf", ".txt")):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.suffix in suffixes and p.name != "timing.jsonl"}


def test_simulate_train_evaluate_are_deterministic(capsys, tmp_path, monkeypatch):
    train = {"steps": 2, "batch": 1, "segment_seconds": 0.25, "checkpoint_every": 1, "val_fraction": 0.0}
    for run in ("a", "b"):
        # same relative paths in both runs, since the report records the checkpoint argument
        (tmp_path / run).mkdir()
        monkeypatch.chdir(tmp_path / run)
        _write_config(tmp_path / run / "c.json", train=train)
        assert _run(capsys, "simulate", "--count", 3, "--out", "data", "--seed", 9)[0] == 0
        assert _run(capsys, "train", "--config", "c.json", "--manifest", "data/manifest.jsonl",
                    "--out", "run", "--seed", 4)[0] == 0
        assert _run(capsys, "evaluate", "--ckpt", "run/checkpoint.dssf",
                    "--manifest", "data/manifest.jsonl", "--out", "report.json")[0] == 0
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) > 10
    assert a == b
    report = json.loads((tmp_path / "a/report.json").read_text())
    assert report["checkpoint"].endswith("checkpoint.dssf") and report["cells"]


def test_evaluate_identity_cells_are_zero(capsys, tmp_path, corpus_mixed):
    code, out, _ = _run(capsys, "evaluate", "--identity", "--manifest", corpus_mixed, "--out", tmp_path / "r.json")
    assert code == 0 and "near dB" in out
    for cell in json.loads((tmp_path / "r.json").read_text())["cells"]:
        for key in ("si_sdri_near", "si_sdri_far", "silence_near", "silence_far"):
            assert cell[key] in (None, 0.0)


def test_bench_writes_report(capsys, tmp_path):
    out = tmp_path / "b.json"
    code, text, _ = _run(capsys, "bench", "--variant", "encdec", "--out", out, "--seconds", "0.5", "--no-curve")
    assert code == 0 and "G MAC/s" in text
    rep = json.loads(out.read_text())
    assert rep["variant"] == "enc_dec_only" and rep["params"] == 817_678
    assert rep["rtf"] > 0 and rep["scaling_curve"] == {}


def test_smoke_failure_names_stage(capsys, tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise OSError("disk full")

    monkeypatch.setattr(cli.scene, "generate_corpus", broken)
    code, _, err = _run(capsys, "smoke", "--out", tmp_path, "--scenes", 2, "--steps", 1, "--seed", 1)
    assert code == 3 and "stage 'simulate'" in err and "disk full" in err


@pytest.mark.slow
def test_smoke_is_deterministic(tmp_path):
    a, _ = cli.run_smoke(7, tmp_path / "a", scenes=3, steps=20)
    b, _ = cli.run_smoke(7, tmp_path / "b", scenes=3, steps=20)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert a["loss_reduction"] >= 0.5


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "dssep.cli", "--help"], capture_output=True, text=True, check=True)
    for sub in ("simulate", "train", "separate", "evaluate", "bench", "smoke"):
        assert sub in out.stdout
