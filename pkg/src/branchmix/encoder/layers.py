"""Building blocks shared by the Branchformer and Conformer stacks.

Every module works on batch-first hidden sequences of shape (B, T, D).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, InputError
from .config import SUBSAMPLE_STRIDES, EncoderConfig


def rotary_angles(
    num_positions: int, head_dim: int, base: float = 10000.0, offset: int = 0, dtype=torch.float32
) -> torch.Tensor:
    """(T, head_dim // 2) rotation angles; pair i turns at base ** (-2i / head_dim)."""
    if head_dim % 2:
        raise ConfigError(f"rotary encoding needs an even head dimension, got {head_dim}")
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    pos = torch.arange(offset, offset + num_positions, dtype=torch.float64)
    return torch.outer(pos, inv_freq).to(dtype)


def apply_rotary(
    x: torch.Tensor, base: float = 10000.0, positions: torch.Tensor | None = None
) -> torch.Tensor:
    """Rotate consecutive feature pairs (2i, 2i+1) of x (..., T, head_dim) by a
    position-dependent angle. Positions default to 0..T-1."""
    head_dim = x.shape[-1]
    if head_dim % 2:
        raise ConfigError(f"rotary encoding needs an even head dimension, got {head_dim}")
    if positions is None:
        angles = rotary_angles(x.shape[-2], head_dim, base, dtype=x.dtype)
    else:
        inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
        angles = (positions.to(torch.float64)[:, None] * inv_freq).to(x.dtype)
    cos, sin = angles.cos(), angles.sin()
    even, odd = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return rotated.flatten(-2)


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention with rotary queries and keys."""

    def __init__(self, dim: int, num_heads: int, rotary: bool = True, rotary_base: float = 10000.0):
        super().__init__()
        if dim % num_heads:
            raise ConfigError("model_dim must be divisible by num_heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.rotary = rotary
        self.rotary_base = rotary_base
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out_proj = nn.Linear(dim, dim)

    def _heads(self, x):
        b, t, _ = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.num_heads, self.head_dim).unbind(2)
        q, k, v = (z.transpose(1, 2) for z in (q, k, v))  # (B, H, T, hd)
        if self.rotary:
            q = apply_rotary(q, self.rotary_base)
            k = apply_rotary(k, self.rotary_base)
        return q, k, v

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        q, k, _ = self._heads(x)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        return scores.softmax(dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self._heads(x)
        ctx = F.scaled_dot_product_attention(q, k, v)
        return self.out_proj(ctx.transpose(1, 2).reshape(b, t, d))


class SummaryMixing(nn.Module):
    """Linear-time token mixing.

    Each frame keeps a local projection f(x_t); all frames share the time
    average of a summary projection s(x_t). The combiner maps
    concat(f(x_t), mean_t s(x_t)) back to the model width.
    """

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.local = nn.Linear(dim, hidden)
        self.summary = nn.Linear(dim, hidden)
        self.combiner = nn.Linear(2 * hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] == 0:
            raise InputError("SummaryMixing needs at least one frame")
        local = F.gelu(self.local(x))
        summary = F.gelu(self.summary(x)).mean(dim=1, keepdim=True)
        merged = torch.cat((local, summary.expand_as(local)), dim=-1)
        return F.gelu(self.combiner(merged))


class ConvolutionalGatingMLP(nn.Module):
    """cgMLP: up-projection, split (a, b), a * depthwise_conv(LN(b)), down-projection."""

    def __init__(self, dim: int, hidden: int, kernel: int, dropout: float = 0.0):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")
        half = hidden // 2
        self.up = nn.Linear(dim, hidden)
        self.gate_norm = nn.LayerNorm(half)
        self.depthwise = nn.Conv1d(half, half, kernel, padding=kernel // 2, groups=half)
        self.down = nn.Linear(half, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a, b = F.gelu(self.up(x)).chunk(2, dim=-1)
        b = self.depthwise(self.gate_norm(b).transpose(1, 2)).transpose(1, 2)
        return self.down(self.dropout(a * b))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__()
        self.inner = nn.Linear(dim, hidden)
        self.outer = nn.Linear(hidden, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.outer(self.dropout(F.silu(self.inner(x))))


class ConvolutionModule(nn.Module):
    """Conformer convolution: pointwise GLU, depthwise conv, norm, SiLU, pointwise.

    LayerNorm stands in for the usual BatchNorm so outputs never depend on
    batch composition.
    """

    def __init__(self, dim: int, kernel: int):
        super().__init__()
        self.pointwise_in = nn.Linear(dim, 2 * dim)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pointwise_out = nn.Linear(dim, dim)

    def forward(self, x):
        x = F.glu(self.pointwise_in(x), dim=-1)
        x = self.depthwise(x.transpose(1, 2)).transpose(1, 2)
        return self.pointwise_out(F.silu(self.norm(x)))


class ConvSubsampler(nn.Module):
    """Raw waveform (B, N) -> (B, floor(N / 960), model_dim) at 25 Hz for 24 kHz input.

    Each layer pads the time axis by one stride in total so that its output
    length is exactly floor(L / stride).
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        chans = cfg.subsample_channels
        self.strides = SUBSAMPLE_STRIDES
        self.convs = nn.ModuleList(
            nn.Conv1d(chans[i], chans[i + 1], kernel_size=2 * s, stride=s)
            for i, s in enumerate(self.strides)
        )
        self.norm = nn.LayerNorm(cfg.model_dim)
        self.total_stride = math.prod(self.strides)

    def output_length(self, num_samples: int) -> int:
        return num_samples // self.total_stride

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        if wave.shape[-1] < self.total_stride:
            raise InputError(
                f"waveform of {wave.shape[-1]} samples is shorter than the "
                f"{self.total_stride}-sample receptive stride"
            )
        x = wave.unsqueeze(1)
        last = len(self.convs) - 1
        for i, (conv, s) in enumerate(zip(self.convs, self.strides)):
            x = conv(F.pad(x, (s // 2, s - s // 2)))
            if i < last:
                x = F.gelu(x)
        return self.norm(x.transpose(1, 2))
