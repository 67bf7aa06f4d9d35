"""Clip sources for pretraining: manifests of audio files or synthetic tones."""

from __future__ import annotations

import glob
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .frontend import (
    SAMPLE_RATE,
    FeatureNormalizer,
    MelConfig,
    StackedMelSequence,
    Waveform,
    extract_features,
    load_audio,
    synthesize_test_waveform,
)
from .masking import derive_seed
from .quantizer import RandomQuantizer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Clip:
    clip_id: int
    waveform: Waveform
    name: str = ""


@dataclass(frozen=True)
class PreparedClip:
    """A clip with its teacher targets, computed once from the unmasked audio."""

    clip_id: int
    waveform: Waveform
    mel_target: np.ndarray  # (T, 512) normalized stacked mel
    tokens: np.ndarray  # (T,)


def read_manifest(path) -> list[str]:
    """Newline-delimited audio paths (blank lines and # comments ignored), or a glob."""
    text = str(path)
    if any(ch in text for ch in "*?["):
        return sorted(glob.glob(text, recursive=True))
    base = Path(path).parent
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            p = Path(line)
            entries.append(str(p if p.is_absolute() else base / p))
    return entries


def load_clips(paths, sample_rate: int = SAMPLE_RATE) -> list[Clip]:
    clips = []
    for path in paths:
        try:
            w = load_audio(path, sample_rate)
        except (OSError, ValueError) as exc:
            logger.warning("skipping unreadable clip %s: %s", path, exc)
            continue
        clips.append(Clip(len(clips), w, str(path)))
    return clips


def synthetic_clips(
    count: int,
    seed: int = 0,
    duration_s: float = 2.0,
    kinds=("sine", "tone_mixture", "chirp", "noise"),
    sample_rate: int = SAMPLE_RATE,
) -> list[Clip]:
    """Random tones, chords, sweeps and noise; a pure function of (count, seed)."""
    if count < 1:
        raise ConfigError("synthetic dataset needs at least one clip")
    clips = []
    for i in range(count):
        rng = np.random.default_rng(derive_seed("synthetic", seed, i))
        kind = kinds[i % len(kinds)]
        amp = float(rng.uniform(0.2, 0.8))
        clip_seed = int(rng.integers(2**31))

        def freq():
            return float(110.0 * 2 ** rng.uniform(0.0, 4.0))

        params = {}
        if kind == "sine":
            params = {"freq": freq(), "phase": float(rng.uniform(0, 2 * np.pi))}
        elif kind == "tone_mixture":
            params = {"freqs": [freq() for _ in range(int(rng.integers(2, 5)))]}
        elif kind == "chirp":
            params = {"f0": freq(), "f1": freq()}
        w = synthesize_test_waveform(kind, clip_seed, duration_s, sample_rate, amp, **params)
        clips.append(Clip(i, w, f"{kind}-{i}"))
    return clips


def compute_clip_features(clips, mel_cfg: MelConfig | None = None, stack_factor: int = 4):
    return [extract_features(c.waveform, mel_cfg, stack_factor) for c in clips]


def prepare_clips(
    clips,
    quantizer: RandomQuantizer,
    normalizer: FeatureNormalizer | None = None,
    mel_cfg: MelConfig | None = None,
    stack_factor: int = 4,
) -> tuple[list[PreparedClip], FeatureNormalizer]:
    """Features, normalization and teacher tokens for every clip.

    When ``normalizer`` is None it is fitted on these clips, which are then
    taken to be the training split.
    """
    if not clips:
        raise InputError("no clips to prepare")
    feats: list[StackedMelSequence] = compute_clip_features(clips, mel_cfg, stack_factor)
    if normalizer is None:
        normalizer = FeatureNormalizer.fit(feats)
    prepared = []
    for clip, f in zip(clips, feats):
        normed = normalizer(f)
        prepared.append(
            PreparedClip(clip.clip_id, clip.waveform, normed.frames, quantizer.tokenize(normed.frames))
        )
    return prepared, normalizer
