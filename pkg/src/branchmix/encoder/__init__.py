from .census import (
    ParameterCensus,
    block_flops,
    census_from_module,
    count_parameters,
    global_branch_flops,
)
from .config import EncoderConfig, reference_config
from .layers import (
    ConvolutionalGatingMLP,
    ConvolutionModule,
    ConvSubsampler,
    FeedForward,
    MultiHeadSelfAttention,
    SummaryMixing,
    apply_rotary,
)
from .model import (
    BranchformerBlock,
    BranchMixModel,
    ConformerBlock,
    ModelOutput,
    build_model,
    make_block,
)

__all__ = [
    "BranchMixModel",
    "BranchformerBlock",
    "ConformerBlock",
    "ConvSubsampler",
    "ConvolutionModule",
    "ConvolutionalGatingMLP",
    "EncoderConfig",
    "FeedForward",
    "ModelOutput",
    "MultiHeadSelfAttention",
    "ParameterCensus",
    "SummaryMixing",
    "apply_rotary",
    "block_flops",
    "build_model",
    "census_from_module",
    "count_parameters",
    "global_branch_flops",
    "make_block",
    "reference_config",
]
