from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..errors import ConfigError

BLOCK_KINDS = ("branchformer", "conformer")
GLOBAL_BRANCHES = ("attention", "summary_mixing")
SUBSAMPLE_STRIDES = (8, 6, 5, 4)


@dataclass(frozen=True)
class EncoderConfig:
    block_kind: str = "branchformer"
    global_branch: str = "summary_mixing"
    num_layers: int = 12
    model_dim: int = 1024
    num_heads: int = 16
    ffn_mult: float = 4.0
    cgmlp_mult: float = 3.0
    conv_kernel: int = 31
    dropout: float = 0.1
    vocab_size: int = 8192
    mel_dim: int = 512
    # width of the SummaryMixing local and summary projections; 0 means model_dim // 2
    summary_dim: int = 0
    rotary_base: float = 10000.0
    seed: int = 0

    def __post_init__(self):
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.global_branch not in GLOBAL_BRANCHES:
            raise ConfigError(
                f"global_branch must be one of {GLOBAL_BRANCHES}, got {self.global_branch!r}"
            )
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.model_dim < 4 or self.model_dim % 4:
            raise ConfigError("model_dim must be a positive multiple of 4")
        if self.global_branch == "attention":
            if self.num_heads < 1 or self.model_dim % self.num_heads:
                raise ConfigError("model_dim must be divisible by num_heads")
            if (self.model_dim // self.num_heads) % 2:
                raise ConfigError("rotary encoding needs an even head dimension")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")
        if self.cgmlp_hidden % 2:
            raise ConfigError("cgmlp hidden size must be even (it is split in two)")
        if self.vocab_size < 2 or self.mel_dim < 1:
            raise ConfigError("vocab_size must be >= 2 and mel_dim >= 1")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def ffn_hidden(self) -> int:
        return int(round(self.ffn_mult * self.model_dim))

    @property
    def cgmlp_hidden(self) -> int:
        return int(round(self.cgmlp_mult * self.model_dim))

    @property
    def summary_hidden(self) -> int:
        return self.summary_dim or self.model_dim // 2

    @property
    def subsample_channels(self) -> tuple[int, ...]:
        d = self.model_dim
        return (1, d // 4, d // 2, d, d)

    @property
    def frame_stride(self) -> int:
        stride = 1
        for s in SUBSAMPLE_STRIDES:
            stride *= s
        return stride

    def replace(self, **changes) -> "EncoderConfig":
        return EncoderConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**data)


def reference_config(block_kind: str, global_branch: str, size: str = "large", **overrides):
    """Small (4 x 768) and large (12 x 1024) layouts from the model table."""
    layers, dim = {"small": (4, 768), "large": (12, 1024)}[size]
    base = dict(
        block_kind=block_kind,
        global_branch=global_branch,
        num_layers=layers,
        model_dim=dim,
        num_heads=overrides.get("model_dim", dim) // 64 or 1,
    )
    return EncoderConfig(**{**base, **overrides})
