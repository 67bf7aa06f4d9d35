"""Masked-prediction objective and training loop.

The loss on a clip is

    L = CE(token_logits[M], tokens[M]) + MSE(mel_logits[M], mel_target[M])

where M is the set of masked 25 Hz frames. Cross-entropy is taken directly
from logits through log-sum-exp; the softmax in the usual written form is
the one inside the cross-entropy, not a second one. Both terms are means
over masked frames (and mel dims for MSE), unit-weighted. Clips without any
masked frame contribute zero to the batch mean.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .data import PreparedClip, prepare_clips
from .encoder import BranchMixModel, EncoderConfig, build_model
from .errors import ConfigError, InputError, TrainingError
from .frontend import FeatureNormalizer
from .masking import MaskConfig, apply_waveform_mask, derive_seed, epoch_seed, sample_mask
from .quantizer import QuantizerConfig, init_quantizer

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "lr", "ce", "mse", "total", "masked_acc", "wallclock_s")
TIMING_COLUMNS = ("wallclock_s",)


@dataclass
class LossBreakdown:
    ce: torch.Tensor
    mse: torch.Tensor
    total: torch.Tensor
    num_masked_frames: int

    def as_floats(self) -> tuple[float, float, float]:
        return self.ce.item(), self.mse.item(), self.total.item()


def compute_loss(
    token_logits: torch.Tensor,
    mel_logits: torch.Tensor,
    tokens,
    mel_target,
    masked,
) -> LossBreakdown:
    """Loss for one clip. ``token_logits`` (T, V), ``mel_logits`` (T, M)."""
    t = token_logits.shape[0]
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    mel_target = torch.as_tensor(mel_target, dtype=mel_logits.dtype)
    if mel_logits.shape[0] != t or tokens.shape[0] != t or mel_target.shape[0] != t:
        raise InputError("logits, tokens and mel targets must share the frame count")
    idx = torch.as_tensor(np.asarray(masked, dtype=np.int64))
    if idx.numel() == 0:
        zero = token_logits.new_zeros(())
        return LossBreakdown(zero, zero.clone(), zero.clone(), 0)
    if int(idx.min()) < 0 or int(idx.max()) >= t:
        raise InputError(f"masked frame index out of range [0, {t})")
    ce = F.cross_entropy(token_logits[idx], tokens[idx])
    mse = F.mse_loss(mel_logits[idx], mel_target[idx])
    return LossBreakdown(ce, mse, ce + mse, int(idx.numel()))


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 1e-4
    final_lr: float = 1e-5
    warmup_steps: int = 25
    total_steps: int = 500
    clip_norm: float = 1.0

    def __post_init__(self):
        if not 0 < self.final_lr <= self.peak_lr:
            raise ConfigError("need 0 < final_lr <= peak_lr")
        if not 0 < self.warmup_steps < self.total_steps:
            raise ConfigError("need 0 < warmup_steps < total_steps")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")

    @classmethod
    def with_warmup_fraction(cls, total_steps: int, fraction: float = 0.05, **kw):
        return cls(warmup_steps=max(1, int(round(fraction * total_steps))), total_steps=total_steps, **kw)


def lr_at_step(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup from 0 to peak, then cosine decay to final_lr."""
    if not 0 <= step <= cfg.total_steps:
        raise ConfigError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * progress))


def global_norm(grads) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(torch.sum(g.detach().double() ** 2))
    return math.sqrt(total)


def clip_gradients(grads, clip_norm: float = 1.0, step: int | None = None) -> list:
    """Rescale gradients so their global L2 norm is at most ``clip_norm``.

    Returns new tensors; None entries pass through.
    """
    if clip_norm <= 0:
        raise ConfigError("clip_norm must be positive")
    grads = list(grads)
    norm = global_norm(grads)
    if not math.isfinite(norm):
        where = "" if step is None else f" at step {step}"
        raise TrainingError(f"non-finite gradient norm{where}")
    if norm <= clip_norm:
        return [None if g is None else g.clone() for g in grads]
    scale = clip_norm / norm
    return [None if g is None else g * scale for g in grads]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    loss_window: int = 50
    mask: MaskConfig = field(default_factory=MaskConfig)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class TrainState:
    model: BranchMixModel
    optimizer: torch.optim.Optimizer
    schedule: ScheduleConfig
    train: TrainConfig
    step: int = 0
    loss_window: deque = field(default_factory=deque)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "optimizer": self.optimizer.state_dict(),
            "schedule": asdict(self.schedule),
            "train": {**asdict(self.train), "mask": asdict(self.train.mask)},
            "loss_window": list(self.loss_window),
        }

    @property
    def smoothed_loss(self) -> float:
        return float(np.mean(self.loss_window)) if self.loss_window else float("nan")


def make_optimizer(model, train: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=0.0, betas=train.adam_betas, eps=train.adam_eps)


def init_train_state(model, schedule: ScheduleConfig, train: TrainConfig) -> TrainState:
    return TrainState(model, make_optimizer(model, train), schedule, train, 0, deque(maxlen=train.loss_window))


@dataclass
class StepResult:
    loss: LossBreakdown
    lr: float
    masked_correct: int
    grad_norm: float

    @property
    def masked_acc(self) -> float:
        n = self.loss.num_masked_frames
        return self.masked_correct / n if n else float("nan")


def masked_batch(batch: list[PreparedClip], mask_cfg: MaskConfig, ep_seed: int, fill_seed: int = 0):
    """Masked waveforms (B, N) plus the masked frame indices of every clip."""
    waves, frames = [], []
    for clip in batch:
        spec = sample_mask(clip.waveform.num_samples, clip.waveform.sample_rate, mask_cfg, ep_seed, clip.clip_id)
        masked = apply_waveform_mask(clip.waveform, spec, mask_cfg.fill, mask_cfg.noise_std, fill_seed)
        waves.append(masked.samples)
        frames.append(spec.frame_indices(25.0, num_frames=clip.tokens.shape[0]))
    lengths = {w.shape[0] for w in waves}
    if len(lengths) != 1:
        raise InputError("clips in a batch must have equal length")
    return torch.from_numpy(np.stack(waves)), frames


def pretrain_step(state: TrainState, batch: list[PreparedClip], epoch: int) -> StepResult:
    """One optimizer update on a batch of prepared clips."""
    if not batch:
        raise InputError("empty batch")
    model, train = state.model, state.train
    lr = lr_at_step(min(state.step + 1, state.schedule.total_steps), state.schedule)
    waves, frames = masked_batch(batch, train.mask, epoch_seed(train.seed, epoch), train.seed)

    model.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed("dropout", train.seed, state.step))
        out = model(waves)

    ce = mse = total = out.token_logits.new_zeros(())
    n_masked = correct = 0
    for i, clip in enumerate(batch):
        lb = compute_loss(out.token_logits[i], out.mel_logits[i], clip.tokens, clip.mel_target, frames[i])
        ce, mse, total = ce + lb.ce, mse + lb.mse, total + lb.total
        n_masked += lb.num_masked_frames
        if lb.num_masked_frames:
            pred = out.token_logits[i, frames[i]].argmax(-1)
            correct += int((pred == torch.as_tensor(clip.tokens[frames[i]])).sum())
    b = len(batch)
    loss = LossBreakdown(ce / b, mse / b, total / b, n_masked)
    if not torch.isfinite(loss.total):
        raise TrainingError(f"non-finite loss at step {state.step}")

    grad_norm = 0.0
    state.optimizer.zero_grad(set_to_none=True)
    if n_masked:
        loss.total.backward()
        params = [p for p in model.parameters() if p.grad is not None]
        grad_norm = global_norm(p.grad for p in params)
        clipped = clip_gradients([p.grad for p in params], state.schedule.clip_norm, state.step)
        for p, g in zip(params, clipped):
            p.grad = g
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        state.optimizer.step()
    state.step += 1
    state.loss_window.append(loss.total.item())
    return StepResult(loss, lr, correct, grad_norm)


def batches_for_epoch(num_clips: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng(derive_seed("order", seed, epoch)).permutation(num_clips)
    return [order[i : i + batch_size] for i in range(0, num_clips, batch_size)]


@torch.no_grad()
def evaluate_masked_accuracy(model, clips: list[PreparedClip], mask_cfg: MaskConfig, seed: int, batch_size: int = 16):
    """Masked-frame top-1 token accuracy in eval mode under a fixed mask draw."""
    model.eval()
    correct = total = 0
    for start in range(0, len(clips), batch_size):
        batch = clips[start : start + batch_size]
        waves, frames = masked_batch(batch, mask_cfg, epoch_seed(seed, -1), seed)
        logits = model(waves).token_logits
        for i, clip in enumerate(batch):
            if len(frames[i]):
                pred = logits[i, frames[i]].argmax(-1).numpy()
                correct += int((pred == clip.tokens[frames[i]]).sum())
                total += len(frames[i])
    return correct / total if total else float("nan")


@dataclass
class PretrainResult:
    checkpoint: Path
    metrics_path: Path
    metrics: list[dict]
    state: TrainState
    clips: list[PreparedClip]
    normalizer: FeatureNormalizer


def _format_row(row: dict) -> dict:
    return {k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()}


def run_pretraining(
    clips,
    encoder_cfg: EncoderConfig,
    schedule: ScheduleConfig,
    train: TrainConfig | None = None,
    quantizer_cfg: QuantizerConfig | None = None,
    out_dir=".",
    resume_from=None,
    stop_at: int | None = None,
    should_stop=None,
) -> PretrainResult:
    """Train from scratch (or resume) for ``schedule.total_steps`` updates.

    Writes ``metrics.csv`` (appending when resuming), periodic
    ``checkpoint-<step>.pt`` files and ``final.pt``. ``stop_at`` ends the run
    early after that many total steps, which is how interrupted runs are
    simulated. ``should_stop`` is polled before every step; when it returns
    True the run checkpoints and returns, e.g. after a signal.
    """
    train = train or TrainConfig()
    quantizer_cfg = quantizer_cfg or QuantizerConfig(input_dim=encoder_cfg.mel_dim, codebook_size=encoder_cfg.vocab_size)
    if quantizer_cfg.codebook_size != encoder_cfg.vocab_size:
        raise ConfigError("quantizer codebook size must equal the encoder vocab size")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    clips = list(clips)
    if not clips:
        raise InputError("empty epoch: no usable clips")
    quantizer = init_quantizer(quantizer_cfg)

    model = build_model(encoder_cfg)
    state = init_train_state(model, schedule, train)
    normalizer = None
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.encoder_config != encoder_cfg:
            raise ConfigError("resume checkpoint has a different encoder config")
        model.load_state_dict(ckpt.state_dict)
        ts = ckpt.train_state or {}
        state.optimizer.load_state_dict(ts["optimizer"])
        state.step = ts["step"]
        state.loss_window.extend(ts["loss_window"])
        normalizer = ckpt.normalizer

    prepared, normalizer = prepare_clips(clips, quantizer, normalizer)

    metrics_path = out_dir / "metrics.csv"
    mode = "a" if resume_from is not None and metrics_path.exists() else "w"
    if mode == "a":
        _truncate_metrics(metrics_path, state.step)
    fh = open(metrics_path, mode, newline="")
    writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
    if mode == "w":
        writer.writeheader()

    def checkpoint(path):
        return save_checkpoint(path, model, quantizer_cfg, normalizer, state.to_dict())

    n_batches = math.ceil(len(prepared) / train.batch_size)
    end = schedule.total_steps if stop_at is None else min(stop_at, schedule.total_steps)
    metrics = []
    last_good = None
    t0 = time.perf_counter()
    try:
        while state.step < end:
            if should_stop is not None and should_stop():
                logger.warning("stop requested at step %d", state.step)
                break
            epoch, pos = divmod(state.step, n_batches)
            idx = batches_for_epoch(len(prepared), train.batch_size, train.seed, epoch)[pos]
            try:
                res = pretrain_step(state, [prepared[i] for i in idx], epoch)
            except TrainingError as exc:
                raise TrainingError(f"{exc}; last good checkpoint: {last_good}") from exc
            ce, mse, total = res.loss.as_floats()
            row = {
                "step": state.step,
                "lr": res.lr,
                "ce": ce,
                "mse": mse,
                "total": total,
                "masked_acc": res.masked_acc,
                "wallclock_s": round(time.perf_counter() - t0, 3),
            }
            metrics.append(row)
            writer.writerow(_format_row(row))
            if train.checkpoint_every and state.step % train.checkpoint_every == 0:
                fh.flush()
                last_good = checkpoint(out_dir / f"checkpoint-{state.step:06d}.pt")
    finally:
        fh.close()

    final = checkpoint(out_dir / ("final.pt" if state.step >= schedule.total_steps else f"checkpoint-{state.step:06d}.pt"))
    return PretrainResult(final, metrics_path, metrics, state, prepared, normalizer)


def _truncate_metrics(path: Path, step: int) -> None:
    """Drop logged rows past ``step`` so a resumed run does not duplicate them."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        writer.writerows(r for r in rows if int(r["step"]) <= step)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average; entry i averages values[max(0, i-window+1) : i+1]."""
    values = np.asarray(values, dtype=np.float64)
    csum = np.concatenate(([0.0], np.cumsum(values)))
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(0, idx - window)
    return (csum[idx] - csum[lo]) / (idx - lo)
