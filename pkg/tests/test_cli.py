import json
import os
import signal
import subprocess
import sys
import time

import numpy as np
import pytest

from branchmix.cli import OUT_DIR_ENV, SNAPSHOT_NAME, run
from branchmix.encoder import count_parameters, reference_config
from branchmix.frontend import extract_features, synthesize_test_waveform, write_feature_file, write_wav
from branchmix.pretrain import read_metrics
from branchmix.probe import read_embeddings
from branchmix.quantizer import QuantizerConfig, RandomQuantizer, init_quantizer

TINY = ["--dim", "16", "--layers", "1", "--heads", "2", "--synthetic", "4", "--duration", "1", "--batch-size", "2"]


def cli(capsys, *argv):
    code = run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def assert_one_line_error(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: ")


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    assert run(["pretrain", *TINY, "--steps", "3", "--out-dir", str(out)]) == 0
    return out / "final.pt"


def test_census_smoke_and_determinism(capsys, tmp_path):
    argv = ["census", "--block", "branchformer", "--branch", "summary_mixing", "--dim", "1024", "--layers", "12"]
    code, out, _ = cli(capsys, *argv, "--out-dir", str(tmp_path))
    assert code == 0
    code2, out2, _ = cli(capsys, *argv, "--out-dir", str(tmp_path))
    assert out == out2
    doc = json.loads(out.strip().splitlines()[-1])
    assert doc == count_parameters(reference_config("branchformer", "summary_mixing")).to_dict()
    assert "global_branch" in out and "total" in out
    assert (tmp_path / SNAPSHOT_NAME).exists()
    saved = json.loads((tmp_path / "census.json").read_text())
    assert saved["census"] == doc


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = cli(capsys, "census", "--bogus")
    assert code == 2
    assert_one_line_error(err)


def test_missing_subcommand(capsys):
    code, _, err = cli(capsys)
    assert code == 2
    assert_one_line_error(err)


def test_invalid_config_value(capsys, tmp_path):
    code, _, err = cli(capsys, "census", "--dim", "30", "--out-dir", str(tmp_path))
    assert code == 2
    assert "ConfigError" in err


def test_runtime_failure(capsys, tmp_path):
    code, _, err = cli(capsys, "probe", "--checkpoint", str(tmp_path / "nope.pt"), "--out-dir", str(tmp_path))
    assert code == 1
    assert_one_line_error(err)


def test_pretrain_reproducible(capsys, tmp_path):
    for name in ("a", "b"):
        code, out, _ = cli(capsys, "pretrain", *TINY, "--steps", "4", "--seed", "7", "--out-dir", str(tmp_path / name))
        assert code == 0 and "step 4/4" in out

    def rows(name):
        return [{k: v for k, v in r.items() if k != "wallclock_s"} for r in read_metrics(tmp_path / name / "metrics.csv")]

    assert rows("a") == rows("b")
    assert (tmp_path / "a" / SNAPSHOT_NAME).read_bytes() == (tmp_path / "b" / SNAPSHOT_NAME).read_bytes()
    snap = json.loads((tmp_path / "a" / SNAPSHOT_NAME).read_text())
    assert snap["seed"] == snap["encoder"]["seed"] == snap["quantizer"]["seed"] == snap["train"]["seed"] == 7
    assert snap["train"]["mask"]["mask_prob"] == 0.2
    assert snap["schedule"]["warmup_steps"] == 1


def test_config_file_and_flag_precedence(capsys, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text("model_dim = 16\nnum_layers = 1\nnum_heads = 2\nsynthetic = 4\nduration_s = 1.0\n"
                   "batch_size = 2\ntotal_steps = 9\nmask_prob = 0.5\npeak_lr = 3e-4\n")
    code, _, _ = cli(capsys, "pretrain", "--config", str(cfg), "--steps", "2", "--out-dir", str(tmp_path / "o"))
    assert code == 0
    snap = json.loads((tmp_path / "o" / SNAPSHOT_NAME).read_text())
    assert snap["schedule"]["total_steps"] == 2
    assert snap["schedule"]["peak_lr"] == 3e-4
    assert snap["train"]["mask"]["mask_prob"] == 0.5
    assert snap["encoder"]["model_dim"] == 16


def test_config_file_unknown_key(capsys, tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("learning_rate = 1.0\n")
    code, _, err = cli(capsys, "pretrain", "--config", str(cfg), "--synthetic", "2", "--out-dir", str(tmp_path))
    assert code == 2
    assert "learning_rate" in err


def test_pretrain_needs_data(capsys, tmp_path):
    code, _, err = cli(capsys, "pretrain", "--steps", "2", "--out-dir", str(tmp_path))
    assert code == 2


def test_env_out_dir(capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path / "from-env"))
    assert cli(capsys, "census")[0] == 0
    assert (tmp_path / "from-env" / "census.json").exists()
    assert cli(capsys, "census", "--out-dir", str(tmp_path / "flag"))[0] == 0
    assert (tmp_path / "flag" / "census.json").exists()


def test_bench_scaling_csv(capsys, tmp_path):
    out = tmp_path / "r.csv"
    code, text, _ = cli(
        capsys, "bench", "--branch", "attention", "--dim", "16", "--lengths", "8,16,32,64,128",
        "--reps", "20", "--format", "csv", "--out", str(out), "--out-dir", str(tmp_path),
    )
    assert code == 0
    assert out.read_text() == text
    assert len(text.strip().splitlines()) == 6


def test_bench_size_and_bad_format(capsys, tmp_path):
    code, text, _ = cli(capsys, "bench", "--kind", "size", "--format", "json", "--out-dir", str(tmp_path))
    assert code == 0
    assert json.loads(text)["entries"][0]["reference_reduction_pct"] == 12.3
    code, _, err = cli(capsys, "bench", "--format", "xml", "--out-dir", str(tmp_path))
    assert code == 2


def test_probe_output(capsys, tmp_path, checkpoint):
    code, out, _ = cli(
        capsys, "probe", "--checkpoint", str(checkpoint), "--task", "pitch_class", "--size", "60",
        "--epochs", "3", "--seed", "2", "--out-dir", str(tmp_path),
    )
    assert code == 0
    report_line, summary = out.strip().splitlines()
    report = json.loads(report_line)
    assert report["metric"] == "accuracy" and report["seed"] == 2 and report["split_sizes"] == [48, 6, 6]
    assert summary.startswith("pitch_class: test accuracy=")
    assert json.loads((tmp_path / "probe_report.json").read_text()) == report


def test_export_embeddings(capsys, tmp_path, checkpoint):
    dest = tmp_path / "e.bin"
    code, _, _ = cli(
        capsys, "export-embeddings", "--checkpoint", str(checkpoint), "--size", "50",
        "--out", str(dest), "--out-dir", str(tmp_path),
    )
    assert code == 0
    assert read_embeddings(dest).shape == (50, 16)
    assert len(np.loadtxt(tmp_path / "e.labels.txt")) == 50


def test_tokenize_formats(capsys, tmp_path):
    w = synthesize_test_waveform("chirp", duration_s=1.0)
    write_wav(tmp_path / "clip.wav", w)
    feats = extract_features(w)
    write_feature_file(tmp_path / "feat.bmft", feats.frames, feats.frame_rate)
    q = init_quantizer(QuantizerConfig(seed=5))
    q.save(tmp_path / "q.bin")
    expected = q.tokenize(feats.frames)

    code, _, _ = cli(capsys, "tokenize", str(tmp_path / "clip.wav"), str(tmp_path / "feat.bmft"),
                     "--quantizer", str(tmp_path / "q.bin"), "--out-dir", str(tmp_path / "t"))
    assert code == 0
    for stem in ("clip", "feat"):
        got = [int(x) for x in (tmp_path / "t" / f"{stem}.tokens.txt").read_text().split()]
        assert got == expected.tolist()

    code, _, _ = cli(capsys, "tokenize", str(tmp_path / "clip.wav"), "--seed", "5", "--format", "u32",
                     "--save-quantizer", str(tmp_path / "q2.bin"), "--out-dir", str(tmp_path / "u"))
    assert code == 0
    got = np.frombuffer((tmp_path / "u" / "clip.tokens.u32").read_bytes(), dtype="<u4")
    np.testing.assert_array_equal(got, expected)
    assert (tmp_path / "q2.bin").read_bytes() == (tmp_path / "q.bin").read_bytes()
    RandomQuantizer.load(tmp_path / "q2.bin")


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "branchmix", "census", "--size", "small", "--out-dir", str(tmp_path)],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0
    assert "total" in proc.stdout


def test_sigterm_flushes_checkpoint(tmp_path):
    out = tmp_path / "sig"
    proc = subprocess.Popen(
        [sys.executable, "-m", "branchmix", "pretrain", *TINY, "--steps", "100000", "--out-dir", str(out)],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    metrics = out / "metrics.csv"
    deadline = time.time() + 120
    while time.time() < deadline:
        if metrics.exists() and len(metrics.read_text().splitlines()) > 2:
            break
        time.sleep(0.2)
    proc.send_signal(signal.SIGTERM)
    _, err = proc.communicate(timeout=120)
    assert proc.returncode == 1
    error_lines = [l for l in err.splitlines() if l.startswith("error: ")]
    assert len(error_lines) == 1 and "interrupted at step" in error_lines[0]
    assert list(out.glob("checkpoint-*.pt"))
    assert not os.path.exists(out / "final.pt")
