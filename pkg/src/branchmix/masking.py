"""Random 400 ms time masks on the waveform.

The clip is tiled by segments of ``round(segment_ms / 1000 * sample_rate)``
samples. Every full segment is selected independently with probability
``mask_prob``; a trailing partial segment is never selected. Selected spans
are zero-filled in the waveform, and the 25 Hz frames lying entirely inside
the selected spans are the ones the loss is computed on.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError, InputError
from .frontend import Waveform


@dataclass(frozen=True)
class MaskConfig:
    segment_ms: float = 400.0
    mask_prob: float = 0.20
    fill: str = "zero"  # or "noise"
    noise_std: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError(f"mask_prob must be in [0, 1], got {self.mask_prob}")
        if self.segment_ms <= 0:
            raise ConfigError("segment_ms must be positive")
        if self.fill not in ("zero", "noise"):
            raise ConfigError(f"unknown fill {self.fill!r}")

    def segment_samples(self, sample_rate: int) -> int:
        return int(round(self.segment_ms / 1000.0 * sample_rate))


@dataclass(frozen=True)
class MaskSpec:
    num_samples: int
    sample_rate: int
    segment_samples: int
    mask_prob: float
    epoch_seed: int
    clip_id: int
    selected_segments: tuple[int, ...] = field(default=())

    @property
    def num_full_segments(self) -> int:
        return self.num_samples // self.segment_samples

    @property
    def segment_ms(self) -> float:
        return 1000.0 * self.segment_samples / self.sample_rate

    def frame_indices(self, frame_rate: float = 25.0, num_frames: int | None = None):
        return mask_to_frame_indices(self, frame_rate, num_frames)

    def to_text(self) -> str:
        segs = ",".join(str(s) for s in self.selected_segments)
        return f"{self.epoch_seed},{self.clip_id},{self.mask_prob!r},[{segs}]"

    @classmethod
    def from_text(
        cls, text: str, num_samples: int, sample_rate: int = 24000, segment_ms: float = 400.0
    ) -> "MaskSpec":
        head, _, tail = text.strip().partition("[")
        epoch_seed, clip_id, prob, _ = head.split(",")
        body = tail.rstrip("]").strip()
        segments = tuple(int(s) for s in body.split(",")) if body else ()
        return cls(
            num_samples=num_samples,
            sample_rate=sample_rate,
            segment_samples=MaskConfig(segment_ms).segment_samples(sample_rate),
            mask_prob=float(prob),
            epoch_seed=int(epoch_seed),
            clip_id=int(clip_id),
            selected_segments=segments,
        )


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from an ordered tuple of ints/strings."""
    digest = hashlib.blake2b(repr(tuple(parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def epoch_seed(global_seed: int, epoch: int) -> int:
    return derive_seed("epoch", global_seed, epoch)


def sample_mask(
    num_samples: int,
    sample_rate: int = 24000,
    cfg: MaskConfig | None = None,
    epoch_seed: int = 0,
    clip_id: int = 0,
) -> MaskSpec:
    cfg = cfg or MaskConfig()
    seg = cfg.segment_samples(sample_rate)
    if num_samples < seg:
        raise InputError(f"clip of {num_samples} samples is shorter than one {seg}-sample segment")
    n_full = num_samples // seg
    rng = np.random.default_rng(derive_seed("mask", epoch_seed, clip_id))
    # uniform draws lie in [0, 1): p = 0 selects nothing and p = 1 selects everything
    chosen = np.flatnonzero(rng.random(n_full) < cfg.mask_prob)
    return MaskSpec(
        num_samples=num_samples,
        sample_rate=sample_rate,
        segment_samples=seg,
        mask_prob=cfg.mask_prob,
        epoch_seed=epoch_seed,
        clip_id=clip_id,
        selected_segments=tuple(int(k) for k in chosen),
    )


def sample_mask_coverage(m: MaskSpec) -> np.ndarray:
    covered = np.zeros(m.num_samples, dtype=bool)
    for k in m.selected_segments:
        covered[k * m.segment_samples : (k + 1) * m.segment_samples] = True
    return covered


def apply_waveform_mask(
    w: Waveform, m: MaskSpec, fill: str = "zero", noise_std: float = 0.1, seed: int = 0
) -> Waveform:
    if w.num_samples != m.num_samples:
        raise InputError(f"mask built for {m.num_samples} samples, waveform has {w.num_samples}")
    if w.sample_rate != m.sample_rate:
        raise InputError("mask and waveform sample rates differ")
    out = w.samples.copy()
    covered = sample_mask_coverage(m)
    if fill == "zero":
        out[covered] = 0.0
    elif fill == "noise":
        rng = np.random.default_rng(derive_seed("fill", seed, m.epoch_seed, m.clip_id))
        out[covered] = (noise_std * rng.standard_normal(int(covered.sum()))).astype(np.float32)
    else:
        raise ConfigError(f"unknown fill {fill!r}")
    return Waveform(out, w.sample_rate)


def mask_to_frame_indices(
    m: MaskSpec, frame_rate: float = 25.0, num_frames: int | None = None
) -> np.ndarray:
    """Sorted indices of frames whose span lies entirely inside selected segments."""
    if not m.selected_segments:
        return np.zeros(0, dtype=np.int64)
    hop = Fraction(m.sample_rate) / Fraction(frame_rate).limit_denominator(10**6)
    if num_frames is None:
        num_frames = int(Fraction(m.num_samples) / hop)
    selected = set(m.selected_segments)
    frames = []
    for t in range(num_frames):
        start = t * hop
        end = (t + 1) * hop  # exclusive
        first = int(start // m.segment_samples)
        # last sample index inside the frame is ceil(end) - 1
        last = int((-(-end // 1) - 1) // m.segment_samples)
        if all(k in selected for k in range(first, last + 1)):
            frames.append(t)
    return np.asarray(frames, dtype=np.int64)
