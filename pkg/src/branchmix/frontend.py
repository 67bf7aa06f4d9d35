"""
Waveform -> log-mel -> stacked 25 Hz feature frames.

With the defaults (24 kHz audio, 2048-point FFT, hop 240, 128 mel bins,
stack factor 4) one second of audio becomes 100 mel frames of 128 dims and
then 25 stacked frames of 512 dims:

    T_mel = floor(num_samples / hop)
    T     = floor(T_mel / stack_factor)

Stacked frames are the quantizer input and the mel-regression target.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 24000
LOG_FLOOR = 1e-10

FEATURE_MAGIC = b"BMFT"
_FEATURE_HEADER = struct.Struct("<4sIIf")


@dataclass(frozen=True)
class Waveform:
    """Mono audio; float64 input is kept as float64, anything else becomes float32."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.dtype != np.float64:
            samples = samples.astype(np.float32)
        if samples.ndim != 1:
            raise InputError(f"waveform must be mono 1-D, got shape {samples.shape}")
        object.__setattr__(self, "samples", samples)

    @property
    def num_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = SAMPLE_RATE
    fft_size: int = 2048
    hop: int = 240
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float | None = None

    def __post_init__(self):
        if self.hop <= 0:
            raise ConfigError("hop must be positive")
        if self.fft_size < self.hop:
            raise ConfigError("fft_size must be >= hop")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def upper_hz(self) -> float:
        return self.sample_rate / 2 if self.f_max is None else self.f_max


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # (T_mel, n_mels)
    frame_rate: float

    @property
    def n_mels(self) -> int:
        return int(self.frames.shape[1])


@dataclass(frozen=True)
class StackedMelSequence:
    frames: np.ndarray  # (T, n_mels * stack_factor)
    frame_rate: float
    stack_factor: int

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def d_feat(self) -> int:
        return int(self.frames.shape[1])


# Slaney mel scale: linear below 1 kHz, logarithmic above.
_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(hz):
    hz = np.asarray(hz, dtype=np.float64)
    linear = hz / _F_SP
    log = _MIN_LOG_MEL + np.log(np.maximum(hz, _MIN_LOG_HZ) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(hz >= _MIN_LOG_HZ, log, linear)


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    linear = _F_SP * mel
    log = _MIN_LOG_HZ * np.exp(_LOGSTEP * (mel - _MIN_LOG_MEL))
    return np.where(mel >= _MIN_LOG_MEL, log, linear)


def mel_band_edges(cfg: MelConfig) -> np.ndarray:
    """n_mels + 2 band edges in Hz; filter i peaks at edge i + 1."""
    lo, hi = hz_to_mel(cfg.f_min), hz_to_mel(cfg.upper_hz)
    return mel_to_hz(np.linspace(lo, hi, cfg.n_mels + 2))


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    return mel_band_edges(cfg)[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Slaney-normalized triangular filters, shape (n_mels, fft_size // 2 + 1)."""
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.fft_size // 2 + 1)
    edges = mel_band_edges(cfg)
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


def _hann(n: int) -> np.ndarray:
    # periodic Hann, the usual STFT analysis window
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _check_samples(w: Waveform) -> None:
    if w.num_samples == 0:
        raise InputError("empty waveform")
    if not np.all(np.isfinite(w.samples)):
        raise InputError("waveform contains non-finite samples")


def compute_log_mel(
    w: Waveform, cfg: MelConfig | None = None, dtype=np.float32
) -> MelSpectrogram:
    """Log-power mel spectrogram with reflect center padding.

    Frame t is centred on sample t * hop. Only floor(num_samples / hop) frames
    are kept so that every frame centre lies inside the signal. Pass
    ``dtype=np.float64`` to keep full precision in the output.
    """
    cfg = cfg or MelConfig(sample_rate=w.sample_rate)
    if w.sample_rate != cfg.sample_rate:
        raise InputError(f"sample rate {w.sample_rate} != configured {cfg.sample_rate}")
    _check_samples(w)
    n_frames = w.num_samples // cfg.hop
    if n_frames == 0:
        raise InputError(f"waveform shorter than one hop ({cfg.hop} samples)")

    x = w.samples.astype(np.float64)
    pad = cfg.fft_size // 2
    x = np.pad(x, (pad, pad), mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(x, cfg.fft_size)[:: cfg.hop]
    windows = windows[:n_frames] * _hann(cfg.fft_size)
    power = np.abs(np.fft.rfft(windows, axis=-1)) ** 2
    mel = power @ mel_filterbank(cfg).T
    frames = np.log(np.maximum(mel, LOG_FLOOR)).astype(dtype)
    return MelSpectrogram(frames=frames, frame_rate=cfg.frame_rate)


def stack_frames(m: MelSpectrogram, stack_factor: int = 4) -> StackedMelSequence:
    """Concatenate each run of ``stack_factor`` mel frames; drop the remainder."""
    if stack_factor < 1:
        raise ConfigError("stack_factor must be >= 1")
    t_out = m.frames.shape[0] // stack_factor
    kept = m.frames[: t_out * stack_factor]
    frames = kept.reshape(t_out, stack_factor * m.frames.shape[1])
    return StackedMelSequence(
        frames=frames, frame_rate=m.frame_rate / stack_factor, stack_factor=stack_factor
    )


def unstack_frames(s: StackedMelSequence) -> np.ndarray:
    return s.frames.reshape(s.num_frames * s.stack_factor, s.d_feat // s.stack_factor)


def extract_features(
    w: Waveform, cfg: MelConfig | None = None, stack_factor: int = 4
) -> StackedMelSequence:
    return stack_frames(compute_log_mel(w, cfg), stack_factor)


@dataclass(frozen=True)
class FeatureNormalizer:
    """Per-feature standardization with statistics from a training split."""

    mean: np.ndarray
    std: np.ndarray
    min_std: float = field(default=1e-5, repr=False)

    @classmethod
    def fit(cls, sequences, min_std: float = 1e-5) -> "FeatureNormalizer":
        stacked = np.concatenate([np.asarray(s.frames, np.float64) for s in sequences])
        if stacked.shape[0] == 0:
            raise InputError("cannot fit a normalizer on zero frames")
        mean = stacked.mean(axis=0)
        std = np.maximum(stacked.std(axis=0), min_std)
        return cls(mean=mean.astype(np.float32), std=std.astype(np.float32), min_std=min_std)

    def __call__(self, s: StackedMelSequence) -> StackedMelSequence:
        if s.d_feat != self.mean.shape[0]:
            raise ConfigError(f"normalizer expects dim {self.mean.shape[0]}, got {s.d_feat}")
        frames = ((s.frames - self.mean) / self.std).astype(np.float32)
        return StackedMelSequence(frames, s.frame_rate, s.stack_factor)

    def save(self, path) -> None:
        np.savez(path, mean=self.mean, std=self.std)

    @classmethod
    def load(cls, path) -> "FeatureNormalizer":
        with np.load(path) as data:
            return cls(mean=data["mean"], std=data["std"])


SYNTH_KINDS = ("sine", "chirp", "noise", "tone_mixture")


def synthesize_test_waveform(
    kind: str,
    seed: int = 0,
    duration_s: float = 1.0,
    sample_rate: int = SAMPLE_RATE,
    amplitude: float = 0.5,
    **params,
) -> Waveform:
    """Deterministic test signal.

    params by kind: sine -> freq, phase; chirp -> f0, f1; tone_mixture ->
    freqs (sequence); noise takes none. Amplitudes stay within [-1, 1].
    """
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown waveform kind {kind!r}; expected one of {SYNTH_KINDS}")
    if not 0.0 <= amplitude <= 1.0:
        raise ConfigError("amplitude must lie in [0, 1]")
    nyquist = sample_rate / 2
    n = int(round(sample_rate * duration_s))
    t = np.arange(n, dtype=np.float64) / sample_rate
    rng = np.random.default_rng(seed)

    def check(freq):
        if not 0 < freq < nyquist:
            raise ConfigError(f"frequency {freq} Hz outside (0, {nyquist})")

    if kind == "sine":
        freq = params.get("freq", 440.0)
        check(freq)
        phase = params.get("phase", 0.0)
        x = amplitude * np.sin(2 * np.pi * freq * t + phase)
    elif kind == "chirp":
        f0, f1 = params.get("f0", 110.0), params.get("f1", 1760.0)
        check(f0)
        check(f1)
        # linear sweep: instantaneous frequency f0 + (f1 - f0) t / duration
        sweep = (f1 - f0) / max(duration_s, 1e-12)
        x = amplitude * np.sin(2 * np.pi * (f0 * t + 0.5 * sweep * t**2))
    elif kind == "tone_mixture":
        freqs = list(params.get("freqs", (220.0, 330.0, 440.0)))
        if not freqs:
            raise ConfigError("tone_mixture needs at least one frequency")
        for f in freqs:
            check(f)
        phases = rng.uniform(0, 2 * np.pi, size=len(freqs))
        x = sum(np.sin(2 * np.pi * f * t + p) for f, p in zip(freqs, phases))
        x = amplitude * x / len(freqs)
    else:
        x = amplitude * rng.uniform(-1.0, 1.0, size=n)
    return Waveform(x.astype(np.float32), sample_rate)


def read_wav(path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    """Mono 16-bit PCM or 32-bit float WAV; no resampling."""
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    if rate != expected_rate:
        raise InputError(f"{path}: sample rate {rate} Hz, expected {expected_rate}")
    if data.ndim != 1:
        raise InputError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise InputError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> None:
    from scipy.io import wavfile

    wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))


def read_raw_f32(path, sample_rate: int = SAMPLE_RATE) -> Waveform:
    return Waveform(np.fromfile(path, dtype="<f4"), sample_rate)


def load_audio(path, sample_rate: int = SAMPLE_RATE) -> Waveform:
    path = Path(path)
    if path.suffix.lower() == ".wav":
        return read_wav(path, sample_rate)
    return read_raw_f32(path, sample_rate)


def write_feature_file(path, frames: np.ndarray, frame_rate: float) -> None:
    """Header (magic, T, dim, frame_rate) then row-major little-endian f32."""
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise InputError("feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, frames.shape[0], frames.shape[1], frame_rate))
        fh.write(frames.tobytes())


def read_feature_file(path) -> tuple[np.ndarray, float]:
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise InputError(f"{path}: truncated feature file")
    magic, t, dim, frame_rate = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}")
    if len(raw) != _FEATURE_HEADER.size + 4 * t * dim:
        raise InputError(f"{path}: expected {t}x{dim} values")
    body = np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size)
    if body.size != t * dim:
        raise InputError(f"{path}: expected {t * dim} values, found {body.size}")
    return body.reshape(t, dim).astype(np.float32), float(frame_rate)
