"""Full segmentation network: BMP encoder followed by the decoder head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .decoder import DecoderConfig, decode, init_decoder_params
from .encoder import EncoderConfig, EncoderOutput, encode, init_encoder_params


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)


def init_model_params(cfg: ModelConfig, seed: int = 0, dtype=None) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = init_encoder_params(rng, cfg.encoder, dtype)
    params.update(init_decoder_params(rng, cfg.encoder, cfg.decoder, dtype))
    return params


def forward(params, cfg: ModelConfig, rgb: Tensor | None, hha: Tensor | None):
    """Return ``(logits, aux_logits, encoder_output)``."""
    enc = encode(rgb, hha, cfg.encoder, params)
    logits, aux = decode(enc, cfg.encoder, cfg.decoder, params)
    return logits, aux, enc


def count_params(params) -> int:
    return int(sum(p.size for p in params.values()))


def trainable(params) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if v.requires_grad}


__all__ = ["ModelConfig", "EncoderOutput", "init_model_params", "forward", "count_params", "trainable"]
