"""Frozen random-projection tokenizer.

A frame x (dim d) is projected by a fixed Xavier-uniform matrix A (h x d) and
assigned the index of the nearest L2-normalized codeword of a fixed standard
normal codebook C (n x h):

    y = argmin_i || c_i / |c_i| - A x / |A x| ||

On the unit sphere this is the same as the argmax of cosine similarity, which
is what the production path computes. Nothing here is ever trained.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .frontend import StackedMelSequence

NORM_EPS = 1e-12
SNAPSHOT_MAGIC = b"RPQZ"
SNAPSHOT_VERSION = 1
_SNAPSHOT_HEADER = struct.Struct("<4sIIIIq")
_CHUNK = 4096  # frames per similarity block; bounds memory at 4096 x n doubles


@dataclass(frozen=True)
class QuantizerConfig:
    codebook_size: int = 8192
    codebook_dim: int = 16
    input_dim: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.codebook_dim < 1 or self.input_dim < 1:
            raise ConfigError("codebook_dim and input_dim must be >= 1")


def l2_normalize(x: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, eps)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class RandomQuantizer:
    config: QuantizerConfig
    projection: np.ndarray  # A, (h, d) float32
    codebook: np.ndarray  # C, (n, h) float32
    normalized_codebook: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cfg = self.config
        if self.projection.shape != (cfg.codebook_dim, cfg.input_dim):
            raise ConfigError(f"projection shape {self.projection.shape} does not match config")
        if self.codebook.shape != (cfg.codebook_size, cfg.codebook_dim):
            raise ConfigError(f"codebook shape {self.codebook.shape} does not match config")
        object.__setattr__(self, "projection", _frozen(self.projection.astype(np.float32)))
        object.__setattr__(self, "codebook", _frozen(self.codebook.astype(np.float32)))
        normed = l2_normalize(self.codebook.astype(np.float64))
        object.__setattr__(self, "normalized_codebook", _frozen(normed))

    @property
    def input_dim(self) -> int:
        return self.config.input_dim

    @property
    def codebook_size(self) -> int:
        return self.config.codebook_size

    def tokenize(self, frames: np.ndarray) -> np.ndarray:
        """Token index per row of ``frames`` (T, d); int64."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.input_dim:
            raise ConfigError(f"expected frames of dim {self.input_dim}, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise InputError("frames contain NaN or inf")
        projected = l2_normalize(frames @ self.projection.astype(np.float64).T)
        tokens = np.empty(frames.shape[0], dtype=np.int64)
        for start in range(0, frames.shape[0], _CHUNK):
            similarity = projected[start : start + _CHUNK] @ self.normalized_codebook.T
            # np.argmax returns the first maximum, i.e. the lowest index on ties
            tokens[start : start + _CHUNK] = np.argmax(similarity, axis=1)
        return tokens

    def save(self, path) -> None:
        cfg = self.config
        with open(path, "wb") as fh:
            fh.write(
                _SNAPSHOT_HEADER.pack(
                    SNAPSHOT_MAGIC,
                    SNAPSHOT_VERSION,
                    cfg.codebook_size,
                    cfg.codebook_dim,
                    cfg.input_dim,
                    cfg.seed,
                )
            )
            fh.write(np.ascontiguousarray(self.projection, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(self.codebook, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "RandomQuantizer":
        raw = Path(path).read_bytes()
        if len(raw) < _SNAPSHOT_HEADER.size:
            raise InputError(f"{path}: truncated snapshot")
        magic, version, n, h, d, seed = _SNAPSHOT_HEADER.unpack_from(raw)
        if magic != SNAPSHOT_MAGIC:
            raise InputError(f"{path}: not a quantizer snapshot")
        if version != SNAPSHOT_VERSION:
            raise InputError(f"{path}: unsupported snapshot version {version}")
        if len(raw) != _SNAPSHOT_HEADER.size + 4 * (h * d + n * h):
            raise InputError(f"{path}: truncated snapshot")
        body = np.frombuffer(raw, dtype="<f4", offset=_SNAPSHOT_HEADER.size)
        cfg = QuantizerConfig(codebook_size=n, codebook_dim=h, input_dim=d, seed=seed)
        return cls(cfg, body[: h * d].reshape(h, d), body[h * d :].reshape(n, h))


def xavier_uniform_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_quantizer(cfg: QuantizerConfig | None = None) -> RandomQuantizer:
    cfg = cfg or QuantizerConfig()
    rng = np.random.default_rng(cfg.seed)
    bound = xavier_uniform_bound(cfg.input_dim, cfg.codebook_dim)
    projection = rng.uniform(-bound, bound, size=(cfg.codebook_dim, cfg.input_dim))
    codebook = rng.standard_normal(size=(cfg.codebook_size, cfg.codebook_dim))
    projection = projection.astype(np.float32)
    # float32 rounding must not push entries past the analytic bound
    bound32 = np.float32(bound)
    if bound32 > bound:
        bound32 = np.nextafter(bound32, np.float32(0))
    np.clip(projection, -bound32, bound32, out=projection)
    return RandomQuantizer(cfg, projection, codebook.astype(np.float32))


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray
    frame_rate: float = 25.0

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


def quantize_frame(q: RandomQuantizer, x: np.ndarray) -> int:
    x = np.asarray(x)
    if x.shape != (q.input_dim,):
        raise ConfigError(f"expected a vector of length {q.input_dim}, got shape {x.shape}")
    return int(q.tokenize(x[None, :])[0])


def quantize_sequence(q: RandomQuantizer, s: StackedMelSequence) -> TokenSequence:
    if s.d_feat != q.input_dim:
        raise ConfigError(f"feature dim {s.d_feat} != quantizer input dim {q.input_dim}")
    return TokenSequence(q.tokenize(s.frames), frame_rate=s.frame_rate)
