"""Self-describing checkpoint container.

A checkpoint is a ``torch.save`` dictionary with a format tag, a version, the
full encoder config, the quantizer config (its seed regenerates the frozen
tokenizer), the feature normalizer and the parameter tensors keyed by module
path. Training checkpoints additionally carry the optimizer and loop state.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .encoder import BranchMixModel, EncoderConfig, build_model
from .errors import ConfigError
from .frontend import FeatureNormalizer
from .quantizer import QuantizerConfig

FORMAT = "branchmix-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    quantizer_config: QuantizerConfig
    state_dict: dict
    normalizer: FeatureNormalizer | None = None
    train_state: dict | None = None

    def build_model(self) -> BranchMixModel:
        model = build_model(self.encoder_config)
        model.load_state_dict(self.state_dict)
        return model


def save_checkpoint(
    path,
    model: BranchMixModel,
    quantizer_config: QuantizerConfig,
    normalizer: FeatureNormalizer | None = None,
    train_state: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "encoder_config": model.cfg.to_dict(),
        "quantizer_config": asdict(quantizer_config),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "normalizer": None
        if normalizer is None
        else {"mean": torch.from_numpy(normalizer.mean), "std": torch.from_numpy(normalizer.std)},
        "train_state": train_state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise ConfigError(f"{path}: not a {FORMAT} file")
    if payload["version"] != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload['version']}")
    norm = payload.get("normalizer")
    normalizer = None
    if norm is not None:
        normalizer = FeatureNormalizer(mean=norm["mean"].numpy(), std=norm["std"].numpy())
    return Checkpoint(
        encoder_config=EncoderConfig.from_dict(payload["encoder_config"]),
        quantizer_config=QuantizerConfig(**payload["quantizer_config"]),
        state_dict=payload["state_dict"],
        normalizer=normalizer,
        train_state=payload.get("train_state"),
    )


def parameter_hash(model: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
