import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branchmix.errors import ConfigError, InputError
from branchmix.frontend import StackedMelSequence
from branchmix.quantizer import (
    QuantizerConfig,
    RandomQuantizer,
    init_quantizer,
    quantize_frame,
    quantize_sequence,
)


@pytest.fixture(scope="module")
def q():
    return init_quantizer(QuantizerConfig(seed=11))


def brute_force_tokens(q: RandomQuantizer, frames: np.ndarray) -> np.ndarray:
    """Explicit Euclidean distance to every normalized codeword in extended precision."""
    a = q.projection.astype(np.longdouble)
    c = q.codebook.astype(np.longdouble)
    c = c / np.sqrt((c * c).sum(axis=1, keepdims=True))
    out = []
    for x in frames.astype(np.longdouble):
        p = a @ x
        p = p / np.sqrt((p * p).sum())
        dist = np.sqrt(((c - p) ** 2).sum(axis=1))
        out.append(int(np.argmin(dist)))
    return np.asarray(out)


def test_invalid_configs():
    with pytest.raises(ConfigError):
        QuantizerConfig(codebook_size=1)
    with pytest.raises(ConfigError):
        QuantizerConfig(codebook_dim=0)


def test_same_seed_identical():
    a, b = init_quantizer(QuantizerConfig(seed=3)), init_quantizer(QuantizerConfig(seed=3))
    assert a.projection.tobytes() == b.projection.tobytes()
    assert a.codebook.tobytes() == b.codebook.tobytes()
    c = init_quantizer(QuantizerConfig(seed=4))
    assert not np.array_equal(a.codebook, c.codebook)


def test_xavier_bound(q):
    bound = np.sqrt(6 / (16 + 512))
    assert np.all(np.abs(q.projection.astype(np.float64)) <= bound)
    # uniform, so the extremes come close to the bound
    assert np.abs(q.projection).max() > 0.99 * bound


def test_codebook_moments(q):
    c = q.codebook.astype(np.float64)
    assert c.size == 131072
    assert abs(c.mean()) < 0.01
    assert abs(c.var() - 1) < 0.02


def test_normalized_rows(q):
    np.testing.assert_allclose(np.linalg.norm(q.normalized_codebook, axis=1), 1.0, atol=1e-6)


def test_parameters_are_read_only(q):
    for arr in (q.projection, q.codebook, q.normalized_codebook):
        with pytest.raises(ValueError):
            arr[0, 0] = 1.0


def test_exact_codeword_hit(q):
    # pick x with A x = c_7 via the pseudo-inverse (A has full row rank)
    x = np.linalg.pinv(q.projection.astype(np.float64)) @ q.codebook[7].astype(np.float64)
    assert quantize_frame(q, x) == 7


def test_scale_invariance(q):
    x = np.random.default_rng(0).standard_normal(512)
    assert quantize_frame(q, x) == quantize_frame(q, 3.5 * x)


def test_matches_brute_force_oracle(q):
    frames = np.random.default_rng(1).standard_normal((1000, 512))
    np.testing.assert_array_equal(q.tokenize(frames), brute_force_tokens(q, frames))


def test_cosine_equals_euclidean(q):
    frames = np.random.default_rng(2).standard_normal((200, 512))
    p = frames @ q.projection.astype(np.float64).T
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    euclid = np.argmin(
        np.linalg.norm(p[:, None, :] - q.normalized_codebook[None], axis=2), axis=1
    )
    cosine = np.argmax(p @ q.normalized_codebook.T, axis=1)
    np.testing.assert_array_equal(euclid, cosine)
    np.testing.assert_array_equal(q.tokenize(frames), cosine)


def test_zero_frame_is_defined(q):
    assert quantize_frame(q, np.zeros(512)) == 0


def test_nan_rejected(q):
    x = np.zeros(512)
    x[3] = np.nan
    with pytest.raises(InputError):
        quantize_frame(q, x)


def test_ties_break_to_lowest_index():
    cfg = QuantizerConfig(codebook_size=4, codebook_dim=2, input_dim=2)
    codebook = np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 0.0], [1.0, 0.0]])
    q = RandomQuantizer(cfg, np.eye(2), codebook)
    assert quantize_frame(q, np.array([5.0, 0.0])) == 1


def test_sequence(q):
    frames = np.random.default_rng(3).standard_normal((25, 512)).astype(np.float32)
    tokens = quantize_sequence(q, StackedMelSequence(frames, 25.0, 4))
    assert len(tokens) == 25
    expected = [quantize_frame(q, f) for f in frames]
    np.testing.assert_array_equal(tokens.tokens, expected)
    same = quantize_sequence(q, StackedMelSequence(np.repeat(frames[:1], 10, axis=0), 25.0, 4))
    assert len(set(same.tokens.tolist())) == 1


def test_sequence_dim_mismatch(q):
    with pytest.raises(ConfigError):
        quantize_sequence(q, StackedMelSequence(np.zeros((3, 128), np.float32), 25.0, 1))


def test_snapshot_roundtrip(q, tmp_path):
    q.save(tmp_path / "q.bin")
    back = RandomQuantizer.load(tmp_path / "q.bin")
    assert back.config == q.config
    assert back.projection.tobytes() == q.projection.tobytes()
    assert back.codebook.tobytes() == q.codebook.tobytes()
    raw = (tmp_path / "q.bin").read_bytes()
    assert len(raw) == 28 + 4 * (16 * 512 + 8192 * 16)


def test_snapshot_rejects_garbage(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"\0" * 64)
    with pytest.raises(InputError):
        RandomQuantizer.load(tmp_path / "bad.bin")


def test_codebook_usage(q):
    # harness threshold, not a property of the method
    frames = np.random.default_rng(4).standard_normal((100_000, 512))
    used = np.unique(q.tokenize(frames)).size
    assert used >= 0.5 * 8192


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    alpha=st.floats(1e-3, 1e3, allow_nan=False, allow_infinity=False),
)
def test_positive_scale_invariance_property(q, seed, alpha):
    x = np.random.default_rng(seed).standard_normal(512)
    assert quantize_frame(q, x) == quantize_frame(q, alpha * x)
