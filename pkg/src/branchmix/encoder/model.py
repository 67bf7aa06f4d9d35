from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..errors import InputError
from .config import EncoderConfig
from .layers import (
    ConvolutionalGatingMLP,
    ConvolutionModule,
    ConvSubsampler,
    FeedForward,
    MultiHeadSelfAttention,
    SummaryMixing,
)


def make_global_branch(cfg: EncoderConfig) -> nn.Module:
    if cfg.global_branch == "attention":
        return MultiHeadSelfAttention(cfg.model_dim, cfg.num_heads, True, cfg.rotary_base)
    return SummaryMixing(cfg.model_dim, cfg.summary_hidden)


class BranchformerBlock(nn.Module):
    """y = h + merge(concat(global(LN(h)), cgmlp(LN(h))))"""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.model_dim
        self.global_norm = nn.LayerNorm(d)
        self.global_branch = make_global_branch(cfg)
        self.local_norm = nn.LayerNorm(d)
        self.cgmlp = ConvolutionalGatingMLP(d, cfg.cgmlp_hidden, cfg.conv_kernel, cfg.dropout)
        self.merge = nn.Linear(2 * d, d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        g = self.dropout(self.global_branch(self.global_norm(h)))
        c = self.dropout(self.cgmlp(self.local_norm(h)))
        return h + self.merge(torch.cat((g, c), dim=-1))


class ConformerBlock(nn.Module):
    """Macaron layout: half FFN, global branch, convolution, half FFN, final norm."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.model_dim
        self.ffn1_norm = nn.LayerNorm(d)
        self.ffn1 = FeedForward(d, cfg.ffn_hidden, cfg.dropout)
        self.global_norm = nn.LayerNorm(d)
        self.global_branch = make_global_branch(cfg)
        self.conv_norm = nn.LayerNorm(d)
        self.conv_module = ConvolutionModule(d, cfg.conv_kernel)
        self.ffn2_norm = nn.LayerNorm(d)
        self.ffn2 = FeedForward(d, cfg.ffn_hidden, cfg.dropout)
        self.final_norm = nn.LayerNorm(d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        h = h + 0.5 * self.dropout(self.ffn1(self.ffn1_norm(h)))
        h = h + self.dropout(self.global_branch(self.global_norm(h)))
        h = h + self.dropout(self.conv_module(self.conv_norm(h)))
        h = h + 0.5 * self.dropout(self.ffn2(self.ffn2_norm(h)))
        return self.final_norm(h)


def make_block(cfg: EncoderConfig) -> nn.Module:
    return BranchformerBlock(cfg) if cfg.block_kind == "branchformer" else ConformerBlock(cfg)


@dataclass
class ModelOutput:
    token_logits: torch.Tensor  # (B, T, vocab)
    mel_logits: torch.Tensor  # (B, T, mel_dim)
    hidden: torch.Tensor  # (B, T, model_dim), after the final norm


def init_weights(module: nn.Module) -> None:
    """Xavier-uniform linear maps, zero biases; convolutions keep their default
    weights with zero biases."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv1d) and m.bias is not None:
            nn.init.zeros_(m.bias)


class BranchMixModel(nn.Module):
    """Masked waveform -> token logits and mel-regression logits at 25 Hz."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.subsampler = ConvSubsampler(cfg)
        self.blocks = nn.ModuleList(make_block(cfg) for _ in range(cfg.num_layers))
        self.final_norm = nn.LayerNorm(cfg.model_dim)
        self.token_head = nn.Linear(cfg.model_dim, cfg.vocab_size)
        self.mel_head = nn.Linear(cfg.model_dim, cfg.mel_dim)

    def num_frames(self, num_samples: int) -> int:
        return self.subsampler.output_length(num_samples)

    def encode(self, wave: torch.Tensor) -> torch.Tensor:
        if wave.dim() == 1:
            wave = wave.unsqueeze(0)
        if wave.dim() != 2:
            raise InputError(f"expected waveform batch (B, N), got shape {tuple(wave.shape)}")
        h = self.subsampler(wave)
        for block in self.blocks:
            h = block(h)
        return self.final_norm(h)

    def forward(self, wave: torch.Tensor) -> ModelOutput:
        h = self.encode(wave)
        return ModelOutput(self.token_head(h), self.mel_head(h), h)


def build_model(cfg: EncoderConfig, dtype=torch.float32) -> BranchMixModel:
    """Seed-deterministic construction; the global torch RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = BranchMixModel(cfg)
        init_weights(model)
    return model.to(dtype)
