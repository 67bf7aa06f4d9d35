import numpy as np
import pytest
import torch
from scipy.signal import hilbert

from branchmix.checkpoint import parameter_hash, save_checkpoint
from branchmix.data import Clip
from branchmix.encoder import EncoderConfig, build_model
from branchmix.errors import ConfigError, InputError, TaskError
from branchmix.frontend import Waveform
from branchmix.probe import (
    ProbeConfig,
    extract_embeddings,
    extract_frame_embeddings,
    make_synthetic_task,
    r2_score,
    read_embeddings,
    run_probe,
    split_indices,
    train_probe,
    write_embeddings,
)
from branchmix.quantizer import QuantizerConfig


@pytest.fixture(scope="module")
def backbone():
    return build_model(EncoderConfig(num_layers=1, model_dim=32, num_heads=2, global_branch="summary_mixing", seed=4))


@pytest.fixture(scope="module")
def task():
    return make_synthetic_task("pitch_class", 64, seed=1, duration_s=0.5)


def test_r2_exact_identities():
    y = np.random.default_rng(0).normal(size=37)
    assert r2_score(y, y) == 1.0
    assert r2_score(y, np.full_like(y, y.mean())) == 0.0
    with pytest.raises(TaskError):
        r2_score(np.ones(4), np.ones(4))


def test_probe_config_validation():
    with pytest.raises(ConfigError):
        ProbeConfig(hidden_units=0)
    with pytest.raises(ConfigError):
        ProbeConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        ProbeConfig(pooling="attention")
    cfg = ProbeConfig()
    assert (cfg.hidden_units, cfg.dropout, cfg.pooling) == (512, 0.25, "mean")


def test_split_is_80_10_10_and_order_free():
    ids = list(range(100, 300))
    tr, va, te = split_indices(ids, seed=3)
    assert (len(tr), len(va), len(te)) == (160, 20, 20)
    assert len(set(tr) | set(va) | set(te)) == 200
    perm = np.random.default_rng(0).permutation(200)
    tr2, va2, te2 = split_indices([ids[i] for i in perm], seed=3)
    assert sorted(ids[perm[i]] for i in te2) == sorted(ids[i] for i in te)
    assert not np.array_equal(split_indices(ids, seed=4)[2], te)


# --- synthetic tasks -----------------------------------------------------------


def test_task_determinism():
    a = make_synthetic_task("tone_count", 60, seed=5)
    b = make_synthetic_task("tone_count", 60, seed=5)
    np.testing.assert_array_equal(a.labels, b.labels)
    for x, y in zip(a.clips, b.clips):
        np.testing.assert_array_equal(x.waveform.samples, y.waveform.samples)


@pytest.mark.parametrize("kind,classes", [("pitch_class", 8), ("tone_count", 4)])
def test_classification_labels_balanced(kind, classes):
    t = make_synthetic_task(kind, 403, seed=2, duration_s=0.2)
    counts = np.bincount(t.labels, minlength=classes)
    assert len(counts) == classes
    assert counts.max() - counts.min() <= 1


def test_pitch_class_frequency_matches_label():
    t = make_synthetic_task("pitch_class", 80, seed=0)
    for clip, label in zip(t.clips, t.labels):
        x = clip.waveform.samples.astype(np.float64)
        spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
        peak = np.argmax(spec) * 24000 / len(x)
        assert round(np.log2(peak / 110.0) / 0.5) == label


def envelope_rate(x, sr=24000):
    env = np.abs(hilbert(x.astype(np.float64)))
    env -= env.mean()
    n = 16 * len(env)
    spec = np.abs(np.fft.rfft(env * np.hanning(len(env)), n))
    freqs = np.fft.rfftfreq(n, 1 / sr)
    band = (freqs > 1) & (freqs < 20)
    return freqs[band][np.argmax(spec[band])]


def test_am_rate_recoverable_by_envelope_oracle():
    t = make_synthetic_task("am_rate_regression", 150, seed=3)
    est = [envelope_rate(c.waveform.samples) for c in t.clips]
    assert r2_score(t.labels, est) > 0.99


def test_task_size_floor():
    with pytest.raises(ConfigError):
        make_synthetic_task("pitch_class", 49)
    with pytest.raises(ConfigError):
        make_synthetic_task("key_detection", 100)


# --- embeddings ----------------------------------------------------------------


def test_extraction_is_frozen_and_deterministic(backbone, task):
    before = parameter_hash(backbone)
    backbone.train()
    a = extract_embeddings(backbone, task.clips[:6])
    b = extract_embeddings(backbone, task.clips[:6])
    assert parameter_hash(backbone) == before
    assert backbone.training
    assert a.shape == (6, 32)
    np.testing.assert_array_equal(a, b)


def test_same_clip_twice(backbone, task):
    c = task.clips[0]
    e = extract_embeddings(backbone, [c, Clip(99, c.waveform)])
    np.testing.assert_array_equal(e[0], e[1])


def test_mean_pooling_matches_frames(backbone, task):
    clips = task.clips[:4] + [Clip(50, Waveform(np.zeros(24000 * 2, np.float32)))]
    frames = extract_frame_embeddings(backbone, clips)
    pooled = extract_embeddings(backbone, clips, pooling="mean")
    for f, p in zip(frames, pooled):
        np.testing.assert_allclose(p, f.sum(axis=0) / f.shape[0], atol=1e-6)
    maxed = extract_embeddings(backbone, clips, pooling="max")
    np.testing.assert_allclose(maxed[0], frames[0].max(axis=0))


def test_extraction_from_checkpoint(tmp_path, backbone, task):
    path = save_checkpoint(tmp_path / "m.pt", backbone, QuantizerConfig())
    np.testing.assert_array_equal(
        extract_embeddings(path, task.clips[:3]), extract_embeddings(backbone, task.clips[:3])
    )


def test_incompatible_sample_rate(backbone):
    clip = Clip(0, Waveform(np.zeros(16000, np.float32), 16000))
    with pytest.raises(ConfigError):
        extract_embeddings(backbone, [clip])
    with pytest.raises(InputError):
        extract_embeddings(backbone, [])


def test_embedding_file_roundtrip(tmp_path):
    e = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32)
    write_embeddings(tmp_path / "e.bin", e)
    raw = (tmp_path / "e.bin").read_bytes()
    assert len(raw) == 16 + 7 * 5 * 4
    np.testing.assert_array_equal(read_embeddings(tmp_path / "e.bin"), e)
    (tmp_path / "bad.bin").write_bytes(raw[:30])
    with pytest.raises(InputError):
        read_embeddings(tmp_path / "bad.bin")


# --- probe training --------------------------------------------------------------


def separable(n=300, classes=4, dim=16, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, dim)) * 4
    labels = rng.permutation(np.arange(n) % classes)
    return centers[labels] + rng.normal(size=(n, dim)), labels


def test_separable_task_learned():
    x, y = separable()
    _, report = train_probe(x, y, ProbeConfig(num_classes=4, epochs=50), seed=0)
    assert report.metric == "accuracy"
    assert report.value >= 0.95
    assert report.split_sizes == (240, 30, 30)


def test_random_labels_stay_near_chance():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(400, 16))
    y = rng.permutation(np.arange(400) % 4)
    _, report = train_probe(x, y, ProbeConfig(num_classes=4, epochs=50), seed=1)
    assert abs(report.value - 0.25) <= 0.15


def test_regression_probe_reports_r2():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(200, 8))
    y = x @ rng.normal(size=8) + 3.0
    _, report = train_probe(x, y, ProbeConfig(task_kind="regression", epochs=100), seed=0)
    assert report.metric == "r2"
    assert report.value > 0.9


def test_probe_is_seed_deterministic():
    x, y = separable(n=120)
    cfg = ProbeConfig(num_classes=4, epochs=5)
    p1, r1 = train_probe(x, y, cfg, seed=7)
    p2, r2 = train_probe(x, y, cfg, seed=7)
    assert r1 == r2
    for a, b in zip(p1.head.parameters(), p2.head.parameters()):
        assert torch.equal(a, b)


def test_single_class_training_split():
    x = np.random.default_rng(0).normal(size=(60, 4))
    with pytest.raises(TaskError):
        train_probe(x, np.zeros(60, int), ProbeConfig(num_classes=2), seed=0)
    with pytest.raises(InputError):
        train_probe(x, np.zeros(59, int), ProbeConfig(num_classes=2), seed=0)


def test_probe_leaves_backbone_untouched(backbone):
    before = parameter_hash(backbone)
    report = run_probe(backbone, "pitch_class", seed=0, size=64, epochs=3)
    assert parameter_hash(backbone) == before
    assert report.split_sizes == (51, 6, 7)
    assert "accuracy" in report.summary()
