"""Segmentation head over the first and last fused encoder maps.

The deep map is upsampled to the shallow map's resolution, concatenated,
refined by a 3x3 conv block, projected to class scores and resized to the
input. An auxiliary 1x1 head scores the deep map directly.

When the encoder produces no final fused map (ungated last stage) each
stream gets its own head and the two predictions are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderOutput
from .errors import ShapeMismatch


@dataclass(frozen=True)
class DecoderConfig:
    num_classes: int = 4
    mid_channels: int = 16
    aux_enabled: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.mid_channels < 1:
            raise ValueError("mid_channels must be positive")


def head_prefixes(enc_cfg: EncoderConfig) -> list[str]:
    if enc_cfg.has_fused_output or enc_cfg.modality != "both":
        return ["dec."]
    return ["dec.rgb.", "dec.hha."]


def head_channels(enc_cfg: EncoderConfig) -> tuple[int, int]:
    if enc_cfg.has_fused_output:
        gated = enc_cfg.gated_stages
        return enc_cfg.channels[gated[0]], enc_cfg.channels[gated[-1]]
    return enc_cfg.channels[0], enc_cfg.channels[-1]


def init_decoder_params(rng: np.random.Generator, enc_cfg: EncoderConfig, cfg: DecoderConfig, dtype=None) -> dict[str, Tensor]:
    c_low, c_high = head_channels(enc_cfg)
    k, mid = cfg.num_classes, cfg.mid_channels
    params: dict[str, Tensor] = {}
    for p in head_prefixes(enc_cfg):
        params[p + "refine.weight"] = nn.he_conv(rng, mid, c_low + c_high, 3, dtype)
        params[p + "refine.norm.gamma"] = nn.param_ones((mid,), dtype)
        params[p + "refine.norm.beta"] = nn.param_zeros((mid,), dtype)
        params[p + "cls.weight"] = nn.he_conv(rng, k, mid, 1, dtype)
        params[p + "cls.bias"] = nn.param_zeros((k,), dtype)
        if cfg.aux_enabled:
            params[p + "aux.weight"] = nn.he_conv(rng, k, c_high, 1, dtype)
            params[p + "aux.bias"] = nn.param_zeros((k,), dtype)
    return params


def head_forward(low: Tensor, high: Tensor, size: tuple[int, int], params, prefix: str, cfg: DecoderConfig):
    if low.shape[0] != high.shape[0]:
        raise ShapeMismatch("skip maps disagree on batch size")
    up = nn.bilinear_resize(high, low.shape[2:])
    x = nn.conv2d(ad.concat([low, up], axis=1), params[prefix + "refine.weight"], padding=1)
    x = nn.relu(nn.channel_norm(x, params[prefix + "refine.norm.gamma"], params[prefix + "refine.norm.beta"]))
    logits = nn.conv2d(x, params[prefix + "cls.weight"], params[prefix + "cls.bias"])
    logits = nn.bilinear_resize(logits, size)
    aux = None
    if cfg.aux_enabled:
        aux = nn.conv2d(high, params[prefix + "aux.weight"], params[prefix + "aux.bias"])
        aux = nn.bilinear_resize(aux, size)
    return logits, aux


def decode(enc: EncoderOutput, enc_cfg: EncoderConfig, cfg: DecoderConfig, params) -> tuple[Tensor, Tensor | None]:
    size = enc.input_size
    if enc_cfg.has_fused_output:
        if enc.fused_low is None or enc.fused_high is None:
            raise ShapeMismatch("encoder did not produce fused skip maps")
        return head_forward(enc.fused_low, enc.fused_high, size, params, "dec.", cfg)
    if enc_cfg.modality != "both":
        name = enc_cfg.modality
        return head_forward(enc.stream_low(name), enc.stream_high(name), size, params, "dec.", cfg)
    outs = [
        head_forward(enc.stream_low(name), enc.stream_high(name), size, params, f"dec.{name}.", cfg)
        for name in ("rgb", "hha")
    ]
    logits = (outs[0][0] + outs[1][0]) * 0.5
    aux = (outs[0][1] + outs[1][1]) * 0.5 if cfg.aux_enabled else None
    return logits, aux
