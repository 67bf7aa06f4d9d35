"""Masked-prediction pretraining for music audio with a frozen random-projection
tokenizer and a Branchformer/Conformer encoder whose global branch is either
multi-head self-attention or SummaryMixing."""

__version__ = "0.1.0"
