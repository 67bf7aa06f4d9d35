"""Analytic parameter and FLOP counts.

The parameter formulas mirror the module definitions one layer at a time and
are checked against instantiated models in the test suite. FLOPs count a
multiply-add as two operations; elementwise activations are ignored, which
keeps every term an exact multiple of T or T**2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch.nn as nn

from .config import SUBSAMPLE_STRIDES, EncoderConfig

COMPONENTS = (
    "subsampler",
    "global_branch",
    "cgmlp",
    "merge",
    "ffn",
    "conv_module",
    "heads",
    "norms",
)


@dataclass
class ParameterCensus:
    total: int = 0
    per_component: dict[str, int] = field(default_factory=lambda: dict.fromkeys(COMPONENTS, 0))

    def add(self, component: str, count: int) -> None:
        self.per_component[component] += count
        self.total += count

    def to_dict(self) -> dict:
        return {"total": self.total, "per_component": dict(self.per_component)}


def _linear(i: int, o: int) -> int:
    return i * o + o


def _norm(n: int) -> int:
    return 2 * n


def _conv(i: int, o: int, k: int, groups: int = 1) -> int:
    return o * (i // groups) * k + o


def global_branch_parameters(cfg: EncoderConfig) -> int:
    d = cfg.model_dim
    if cfg.global_branch == "attention":
        return _linear(d, 3 * d) + _linear(d, d)
    dh = cfg.summary_hidden
    return 2 * _linear(d, dh) + _linear(2 * dh, d)


def count_parameters(cfg: EncoderConfig) -> ParameterCensus:
    census = ParameterCensus()
    d = cfg.model_dim
    chans = cfg.subsample_channels
    for i, s in enumerate(SUBSAMPLE_STRIDES):
        census.add("subsampler", _conv(chans[i], chans[i + 1], 2 * s))
    census.add("norms", _norm(d))

    for _ in range(cfg.num_layers):
        census.add("global_branch", global_branch_parameters(cfg))
        if cfg.block_kind == "branchformer":
            half = cfg.cgmlp_hidden // 2
            census.add(
                "cgmlp",
                _linear(d, cfg.cgmlp_hidden)
                + _conv(half, half, cfg.conv_kernel, groups=half)
                + _linear(half, d),
            )
            census.add("norms", _norm(half) + 2 * _norm(d))
            census.add("merge", _linear(2 * d, d))
        else:
            census.add("ffn", 2 * (_linear(d, cfg.ffn_hidden) + _linear(cfg.ffn_hidden, d)))
            census.add(
                "conv_module",
                _linear(d, 2 * d) + _conv(d, d, cfg.conv_kernel, groups=d) + _linear(d, d),
            )
            census.add("norms", 6 * _norm(d))

    census.add("norms", _norm(d))
    census.add("heads", _linear(d, cfg.vocab_size) + _linear(d, cfg.mel_dim))
    return census


_PATH_COMPONENTS = {
    "subsampler": "subsampler",
    "global_branch": "global_branch",
    "cgmlp": "cgmlp",
    "merge": "merge",
    "ffn1": "ffn",
    "ffn2": "ffn",
    "conv_module": "conv_module",
    "token_head": "heads",
    "mel_head": "heads",
}


def census_from_module(model: nn.Module) -> ParameterCensus:
    """Count trainable scalars of an instantiated model by component."""
    census = ParameterCensus()
    for mod_name, module in model.named_modules():
        own = [p for p in module.parameters(recurse=False) if p.requires_grad]
        if not own:
            continue
        if isinstance(module, nn.LayerNorm):
            component = "norms"
        else:
            parts = mod_name.split(".")
            component = next((_PATH_COMPONENTS[p] for p in parts if p in _PATH_COMPONENTS), None)
            if component is None:
                raise ValueError(f"parameter owner {mod_name!r} has no census component")
        census.add(component, sum(p.numel() for p in own))
    return census


def _linear_flops(t: int, i: int, o: int) -> int:
    return 2 * t * i * o


def global_branch_flops(cfg: EncoderConfig, t: int) -> int:
    """Forward FLOPs of one global branch on a length-t sequence."""
    d = cfg.model_dim
    if cfg.global_branch == "attention":
        h = cfg.num_heads
        projections = _linear_flops(t, d, 3 * d) + _linear_flops(t, d, d)
        rotary = 2 * 3 * t * d  # q and k: 4 mults + 2 adds per pair
        scores = 2 * t * t * d
        softmax = 3 * h * t * t  # exp, sum, divide
        mixing = 2 * t * t * d
        return projections + rotary + scores + softmax + mixing
    dh = cfg.summary_hidden
    local_and_summary = 2 * _linear_flops(t, d, dh)
    mean = t * dh  # t-1 additions and one scaling per channel
    combiner = _linear_flops(t, 2 * dh, d)
    return local_and_summary + mean + combiner


def block_flops(cfg: EncoderConfig, t: int) -> int:
    d = cfg.model_dim
    total = global_branch_flops(cfg, t)
    if cfg.block_kind == "branchformer":
        half = cfg.cgmlp_hidden // 2
        total += _linear_flops(t, d, cfg.cgmlp_hidden)
        total += 2 * t * half * cfg.conv_kernel + t * half  # depthwise conv, gating product
        total += _linear_flops(t, half, d)
        total += _linear_flops(t, 2 * d, d)
    else:
        total += 2 * (_linear_flops(t, d, cfg.ffn_hidden) + _linear_flops(t, cfg.ffn_hidden, d))
        total += _linear_flops(t, d, 2 * d) + 2 * t * d * cfg.conv_kernel + _linear_flops(t, d, d)
    return total
