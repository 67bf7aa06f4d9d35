"""Frozen-backbone probing on synthetic downstream tasks.

Embeddings come from the final encoder layer, pooled over time. A small head
(one hidden ReLU layer with dropout, then the task output) is trained on
top with Adam and early stopping on the validation split.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint, parameter_hash
from .data import Clip
from .encoder import BranchMixModel
from .errors import ConfigError, InputError, TaskError
from .frontend import SAMPLE_RATE, Waveform
from .masking import derive_seed

TASK_KINDS = ("pitch_class", "tone_count", "am_rate_regression")
POOLINGS = ("mean", "max")
SPLIT = (0.8, 0.1, 0.1)

EMBED_MAGIC = b"BMEB"
_EMBED_HEADER = struct.Struct("<4sIII")  # magic, num_clips, dim, reserved

# pitch classes sit half an octave apart starting at A2
PITCH_BASE_HZ = 110.0
PITCH_STEP_OCTAVES = 0.5
AM_RATE_RANGE = (2.0, 16.0)


@dataclass(frozen=True)
class ProbeConfig:
    hidden_units: int = 512
    dropout: float = 0.25
    task_kind: str = "classification"
    num_classes: int = 2
    target_dim: int = 1
    pooling: str = "mean"
    batch_size: int = 32
    epochs: int = 200
    lr: float = 1e-3
    patience: int = 10

    def __post_init__(self):
        if self.hidden_units < 1:
            raise ConfigError("hidden_units must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.task_kind not in ("classification", "regression"):
            raise ConfigError(f"unknown task kind {self.task_kind!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}")
        if self.task_kind == "classification" and self.num_classes < 2:
            raise ConfigError("classification needs num_classes >= 2")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1 or self.lr <= 0:
            raise ConfigError("batch_size, epochs, patience and lr must be positive")

    @property
    def output_dim(self) -> int:
        return self.num_classes if self.task_kind == "classification" else self.target_dim


@dataclass(frozen=True)
class ProbeReport:
    task: str
    metric: str
    value: float
    split_sizes: tuple[int, int, int]
    seed: int
    epochs_trained: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_sizes"] = list(self.split_sizes)
        return d

    def summary(self) -> str:
        tr, va, te = self.split_sizes
        return f"{self.task}: test {self.metric}={self.value:.4f} (train/val/test {tr}/{va}/{te}, seed {self.seed})"


@dataclass(frozen=True)
class SyntheticTask:
    name: str
    clips: list
    labels: np.ndarray
    task_kind: str
    num_classes: int = 0

    def probe_config(self, **overrides) -> ProbeConfig:
        base = {"task_kind": self.task_kind}
        if self.task_kind == "classification":
            base["num_classes"] = self.num_classes
        return ProbeConfig(**{**base, **overrides})


# --- metrics ------------------------------------------------------------------


def r2_score(y, y_pred) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise TaskError("r2 is undefined for a constant target")
    return float(1.0 - np.sum((y - y_pred) ** 2) / ss_tot)


def accuracy(y, y_pred) -> float:
    return float(np.mean(np.asarray(y) == np.asarray(y_pred)))


# --- synthetic tasks ----------------------------------------------------------


def _balanced_labels(size: int, classes: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(size) % classes)


def _pitch_class(size, rng, sr, duration_s, classes):
    labels = _balanced_labels(size, classes, rng)
    t = np.arange(int(round(sr * duration_s))) / sr
    clips = []
    for label in labels:
        # up to a quarter tone of detune keeps classes well apart
        f0 = PITCH_BASE_HZ * 2 ** (label * PITCH_STEP_OCTAVES + rng.uniform(-1, 1) / 48)
        amp = rng.uniform(0.2, 0.8)
        x = amp * np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
        clips.append(x)
    return clips, labels


def _tone_count(size, rng, sr, duration_s, classes):
    labels = _balanced_labels(size, classes, rng)
    t = np.arange(int(round(sr * duration_s))) / sr
    clips = []
    for label in labels:
        freqs = PITCH_BASE_HZ * 2 ** rng.uniform(0, 4, size=label + 1)
        phases = rng.uniform(0, 2 * np.pi, size=label + 1)
        x = sum(np.sin(2 * np.pi * f * t + p) for f, p in zip(freqs, phases))
        clips.append(rng.uniform(0.2, 0.8) * x / (label + 1))
    return clips, labels


def _am_rate(size, rng, sr, duration_s, _classes):
    t = np.arange(int(round(sr * duration_s))) / sr
    clips, labels = [], []
    for _ in range(size):
        rate = rng.uniform(*AM_RATE_RANGE)
        carrier = 2 * PITCH_BASE_HZ * 2 ** rng.uniform(0, 3)
        depth = rng.uniform(0.5, 0.9)
        envelope = 1 + depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
        x = 0.4 * envelope * np.sin(2 * np.pi * carrier * t + rng.uniform(0, 2 * np.pi))
        clips.append(x)
        labels.append(rate)
    return clips, np.asarray(labels)


_TASKS = {
    "pitch_class": (_pitch_class, "classification", 8),
    "tone_count": (_tone_count, "classification", 4),
    "am_rate_regression": (_am_rate, "regression", 0),
}


def make_synthetic_task(
    kind: str,
    size: int = 400,
    seed: int = 0,
    duration_s: float = 1.0,
    num_classes: int | None = None,
    sample_rate: int = SAMPLE_RATE,
) -> SyntheticTask:
    """Labeled synthetic clips; a pure function of the arguments.

    pitch_class: one sine per clip, label = which of K half-octave pitch bands.
    tone_count: 1..K simultaneous random sines, label = count - 1.
    am_rate_regression: amplitude-modulated sine, target = modulation rate in Hz.
    """
    if kind not in _TASKS:
        raise ConfigError(f"unknown task {kind!r}; expected one of {TASK_KINDS}")
    if size < 50:
        raise ConfigError("synthetic tasks need size >= 50")
    build, task_kind, default_classes = _TASKS[kind]
    classes = num_classes or default_classes
    if task_kind == "classification" and classes < 2:
        raise ConfigError("need at least 2 classes")
    rng = np.random.default_rng(derive_seed("task", kind, seed))
    signals, labels = build(size, rng, sample_rate, duration_s, classes)
    clips = [
        Clip(i, Waveform(x.astype(np.float32), sample_rate), f"{kind}-{i}") for i, x in enumerate(signals)
    ]
    return SyntheticTask(kind, clips, np.asarray(labels), task_kind, classes if task_kind == "classification" else 0)


# --- embeddings ---------------------------------------------------------------


def _as_model(source) -> BranchMixModel:
    if isinstance(source, BranchMixModel):
        return source
    if isinstance(source, (str, Path)):
        source = load_checkpoint(source)
    if isinstance(source, Checkpoint):
        return source.build_model()
    raise ConfigError(f"cannot build a backbone from {type(source).__name__}")


def _frame_embeddings(model: BranchMixModel, clips, batch_size: int) -> list[np.ndarray]:
    for c in clips:
        if c.waveform.sample_rate != SAMPLE_RATE:
            raise ConfigError(f"clip {c.clip_id}: sample rate {c.waveform.sample_rate} Hz, backbone expects {SAMPLE_RATE}")
    out: list[np.ndarray | None] = [None] * len(clips)
    by_length: dict[int, list[int]] = {}
    for i, c in enumerate(clips):
        by_length.setdefault(c.waveform.num_samples, []).append(i)
    dtype = next(model.parameters()).dtype
    for idx in by_length.values():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            wave = torch.from_numpy(np.stack([clips[i].waveform.samples for i in chunk])).to(dtype)
            hidden = model.encode(wave).double().numpy()
            for j, i in enumerate(chunk):
                out[i] = hidden[j]
    return out


def extract_frame_embeddings(source, clips, batch_size: int = 16) -> list[np.ndarray]:
    """Final-layer hidden states per clip, (T_i, model_dim) float64 each."""
    model = _as_model(source)
    was_training = model.training
    before = parameter_hash(model)
    model.eval()
    try:
        with torch.no_grad():
            frames = _frame_embeddings(model, clips, batch_size)
    finally:
        model.train(was_training)
    if parameter_hash(model) != before:
        raise RuntimeError("backbone parameters changed during embedding extraction")
    return frames


def pool(frames: np.ndarray, pooling: str = "mean") -> np.ndarray:
    if pooling == "mean":
        return frames.mean(axis=0)
    if pooling == "max":
        return frames.max(axis=0)
    raise ConfigError(f"pooling must be one of {POOLINGS}")


def extract_embeddings(source, clips, pooling: str = "mean", batch_size: int = 16) -> np.ndarray:
    """One pooled vector per clip: (num_clips, model_dim) float64."""
    if not clips:
        raise InputError("no clips to embed")
    frames = extract_frame_embeddings(source, clips, batch_size)
    return np.stack([pool(f, pooling) for f in frames])


def write_embeddings(path, embeddings: np.ndarray) -> None:
    e = np.ascontiguousarray(embeddings, dtype="<f4")
    if e.ndim != 2:
        raise InputError("embeddings must be a 2-d matrix")
    with open(path, "wb") as fh:
        fh.write(_EMBED_HEADER.pack(EMBED_MAGIC, e.shape[0], e.shape[1], 0))
        fh.write(e.tobytes())


def read_embeddings(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _EMBED_HEADER.size:
        raise InputError(f"{path}: truncated embedding file")
    magic, n, d, _ = _EMBED_HEADER.unpack_from(raw)
    if magic != EMBED_MAGIC:
        raise InputError(f"{path}: not an embedding file")
    if len(raw) != _EMBED_HEADER.size + 4 * n * d:
        raise InputError(f"{path}: expected {n}x{d} values")
    body = np.frombuffer(raw, dtype="<f4", offset=_EMBED_HEADER.size)
    return body.reshape(n, d).copy()


# --- probe training -----------------------------------------------------------


def split_indices(clip_ids, seed: int, fractions=SPLIT) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Train/val/test positions, depending only on the seed and the clip ids."""
    clip_ids = list(clip_ids)
    n = len(clip_ids)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if n_train < 1 or n_val < 1 or n - n_train - n_val < 1:
        raise TaskError(f"{n} examples are too few for a train/val/test split")
    keys = [derive_seed("split", seed, cid) for cid in clip_ids]
    order = np.argsort(keys, kind="stable")
    return np.sort(order[:n_train]), np.sort(order[n_train : n_train + n_val]), np.sort(order[n_train + n_val :])


class ProbeHead(nn.Module):
    def __init__(self, in_dim: int, cfg: ProbeConfig):
        super().__init__()
        self.hidden = nn.Linear(in_dim, cfg.hidden_units)
        self.dropout = nn.Dropout(cfg.dropout)
        self.out = nn.Linear(cfg.hidden_units, cfg.output_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.dropout(F.relu(self.hidden(x))))


@dataclass
class TrainedProbe:
    head: ProbeHead
    cfg: ProbeConfig
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: np.ndarray | None = None
    target_std: np.ndarray | None = None

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        x = torch.from_numpy((np.asarray(embeddings) - self.feature_mean) / self.feature_std).float()
        self.head.eval()
        with torch.no_grad():
            y = self.head(x).double().numpy()
        if self.cfg.task_kind == "classification":
            return y.argmax(axis=1)
        y = y * self.target_std + self.target_mean
        return y[:, 0] if self.cfg.target_dim == 1 else y


def _metric(cfg: ProbeConfig, y, y_pred) -> float:
    return accuracy(y, y_pred) if cfg.task_kind == "classification" else r2_score(y, y_pred)


def train_probe(
    embeddings,
    labels,
    cfg: ProbeConfig,
    seed: int = 0,
    clip_ids=None,
    task: str = "probe",
) -> tuple[TrainedProbe, ProbeReport]:
    """Fit the head on the train split, early-stop on validation loss, score the test split."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(y):
        raise InputError(f"embeddings {x.shape} and labels {y.shape} are not aligned")
    clip_ids = range(len(x)) if clip_ids is None else clip_ids
    tr, va, te = split_indices(clip_ids, seed)

    if cfg.task_kind == "classification":
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= cfg.num_classes:
            raise TaskError(f"labels must lie in [0, {cfg.num_classes})")
        if len(np.unique(y[tr])) < 2:
            raise TaskError("training split contains a single class")
        targets = torch.from_numpy(y)
        t_mean = t_std = None
    else:
        y = y.astype(np.float64).reshape(len(y), -1)
        if y.shape[1] != cfg.target_dim:
            raise TaskError(f"expected {cfg.target_dim} regression targets, got {y.shape[1]}")
        t_mean, t_std = y[tr].mean(axis=0), y[tr].std(axis=0)
        if np.any(t_std == 0):
            raise TaskError("regression target is constant on the training split")
        targets = torch.from_numpy((y - t_mean) / t_std).float()

    f_mean = x[tr].mean(axis=0)
    f_std = np.maximum(x[tr].std(axis=0), 1e-8)
    feats = torch.from_numpy((x - f_mean) / f_std).float()

    def loss_fn(out, target):
        if cfg.task_kind == "classification":
            return F.cross_entropy(out, target)
        return F.mse_loss(out, target)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed("probe", seed))
        head = ProbeHead(x.shape[1], cfg)
        opt = torch.optim.Adam(head.parameters(), lr=cfg.lr)
        gen = torch.Generator().manual_seed(derive_seed("probe-order", seed))
        tr_t, va_t = torch.from_numpy(tr), torch.from_numpy(va)
        best, best_state, stale, epochs = float("inf"), copy.deepcopy(head.state_dict()), 0, 0
        for epoch in range(cfg.epochs):
            head.train()
            order = tr_t[torch.randperm(len(tr_t), generator=gen)]
            for start in range(0, len(order), cfg.batch_size):
                b = order[start : start + cfg.batch_size]
                opt.zero_grad()
                loss_fn(head(feats[b]), targets[b]).backward()
                opt.step()
            epochs = epoch + 1
            head.eval()
            with torch.no_grad():
                val = loss_fn(head(feats[va_t]), targets[va_t]).item()
            if val < best:
                best, best_state, stale = val, copy.deepcopy(head.state_dict()), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        head.load_state_dict(best_state)

    probe = TrainedProbe(head, cfg, f_mean, f_std, t_mean, t_std)
    y_true = y if cfg.task_kind == "classification" else (y[:, 0] if cfg.target_dim == 1 else y)
    value = _metric(cfg, y_true[te], probe.predict(x[te]))
    metric = "accuracy" if cfg.task_kind == "classification" else "r2"
    report = ProbeReport(task, metric, value, (len(tr), len(va), len(te)), seed, epochs)
    return probe, report


def run_probe(
    checkpoint,
    task: str = "pitch_class",
    seed: int = 0,
    size: int = 400,
    shuffle_labels: bool = False,
    **overrides,
) -> ProbeReport:
    """Synthetic task -> frozen embeddings -> probe report.

    ``shuffle_labels`` permutes the labels before training, giving the
    chance-level control.
    """
    data = make_synthetic_task(task, size, seed)
    cfg = data.probe_config(**overrides)
    embeddings = extract_embeddings(checkpoint, data.clips, cfg.pooling)
    labels = data.labels
    if shuffle_labels:
        labels = np.random.default_rng(derive_seed("shuffle", seed)).permutation(labels)
    name = task + (" (shuffled labels)" if shuffle_labels else "")
    _, report = train_probe(embeddings, labels, cfg, seed, [c.clip_id for c in data.clips], name)
    return report
