"""Dual-stream encoder with bi-directional multi-step propagation (BMP).

Each stage runs a modality-specific block on both streams. When the stage
has a gate, the two raw outputs are fused into ``M`` and, with BMP on, each
stream continues as the average of its raw output and ``M``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .autodiff import Tensor
from .errors import NoGateEnabled, ShapeMismatch
from .fusion import FeaturePair, FusionConfig, FusionOutput, fuse, init_fusion_params

MODALITIES = ("both", "rgb", "hha")


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    gate_mask: tuple[bool, ...] | None = None
    stem_channels: int = 0
    in_channels: int = 3
    fusion: FusionConfig = field(default_factory=FusionConfig)
    bmp: bool = True
    modality: str = "both"
    tie_streams: bool = False
    require_fusion: bool = False
    # score each stream with its own head and average, even when the last stage is gated
    stream_heads: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1:
            raise ValueError(f"invalid stage channels {self.channels}")
        mask = (True,) * len(self.channels) if self.gate_mask is None else tuple(bool(g) for g in self.gate_mask)
        if len(mask) != len(self.channels):
            raise ValueError(f"gate_mask has {len(mask)} entries for {len(self.channels)} stages")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.modality != "both":
            mask = (False,) * len(self.channels)
        object.__setattr__(self, "gate_mask", mask)

    @property
    def gated_stages(self) -> list[int]:
        return [i for i, g in enumerate(self.gate_mask) if g]

    @property
    def has_fused_output(self) -> bool:
        """True when the last stage is gated, so fused maps feed the decoder."""
        return self.modality == "both" and bool(self.gate_mask[-1]) and not self.stream_heads

    def stream_names(self) -> tuple[str, ...]:
        return ("rgb", "hha") if self.modality == "both" else (self.modality,)


@dataclass
class StageOutput:
    rgb: Tensor | None
    hha: Tensor | None
    rgb_raw: Tensor | None
    hha_raw: Tensor | None
    fusion: FusionOutput | None


@dataclass
class EncoderOutput:
    fused_low: Tensor | None
    fused_high: Tensor | None
    stages: list[StageOutput]
    input_size: tuple[int, int]

    def stream_low(self, name: str) -> Tensor:
        return getattr(self.stages[0], name)

    def stream_high(self, name: str) -> Tensor:
        return getattr(self.stages[-1], name)


def _block_params(rng, prefix, c_in, c_out, dtype):
    return {
        f"{prefix}conv_a.weight": nn.he_conv(rng, c_out, c_in, 3, dtype),
        f"{prefix}norm_a.gamma": nn.param_ones((c_out,), dtype),
        f"{prefix}norm_a.beta": nn.param_zeros((c_out,), dtype),
        f"{prefix}conv_b.weight": nn.he_conv(rng, c_out, c_out, 3, dtype),
        f"{prefix}norm_b.gamma": nn.param_ones((c_out,), dtype),
        f"{prefix}norm_b.beta": nn.param_zeros((c_out,), dtype),
    }


def _stream_params(rng, cfg: EncoderConfig, stream: str, dtype) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    c_in = cfg.in_channels
    if cfg.stem_channels:
        params[f"enc.{stream}.stem.conv.weight"] = nn.he_conv(rng, cfg.stem_channels, c_in, 3, dtype)
        params[f"enc.{stream}.stem.norm.gamma"] = nn.param_ones((cfg.stem_channels,), dtype)
        params[f"enc.{stream}.stem.norm.beta"] = nn.param_zeros((cfg.stem_channels,), dtype)
        c_in = cfg.stem_channels
    for i, c in enumerate(cfg.channels):
        params.update(_block_params(rng, f"enc.{stream}.s{i}.", c_in, c, dtype))
        c_in = c
    return params


def init_encoder_params(rng: np.random.Generator, cfg: EncoderConfig, dtype=None) -> dict[str, Tensor]:
    streams = cfg.stream_names()
    if cfg.tie_streams and cfg.modality == "both":
        streams = ("rgb",)
    params: dict[str, Tensor] = {}
    for stream in streams:
        params.update(_stream_params(rng, cfg, stream, dtype))
    for i in cfg.gated_stages:
        fp = init_fusion_params(rng, cfg.channels[i], cfg.fusion, dtype)
        params.update({f"enc.gate{i}.{k}": v for k, v in fp.items()})
    return params


def subparams(params, prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _conv_norm_relu(x, params, conv, norm, stride):
    y = nn.conv2d(x, params[conv], stride=stride, padding=1)
    return nn.relu(nn.channel_norm(y, params[norm + ".gamma"], params[norm + ".beta"]))


def stem_forward(x: Tensor, params, prefix: str) -> Tensor:
    return _conv_norm_relu(x, params, prefix + "stem.conv.weight", prefix + "stem.norm", 1)


def stage_forward(x: Tensor, params, prefix: str) -> Tensor:
    """``[conv3x3 -> channel_norm -> ReLU] x 2``, the first conv with stride 2."""
    x = _conv_norm_relu(x, params, prefix + "conv_a.weight", prefix + "norm_a", 2)
    return _conv_norm_relu(x, params, prefix + "conv_b.weight", prefix + "norm_b", 1)


def encode(rgb: Tensor | None, hha: Tensor | None, cfg: EncoderConfig, params) -> EncoderOutput:
    if cfg.require_fusion and not cfg.gated_stages:
        raise NoGateEnabled("decoder skips need at least one gated stage")
    names = cfg.stream_names()
    inputs = {"rgb": rgb, "hha": hha}
    for name in names:
        x = inputs[name]
        if x is None:
            raise ShapeMismatch(f"missing {name} input")
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeMismatch(f"{name} input must be N x {cfg.in_channels} x H x W, got {x.shape}")
    if cfg.modality == "both" and rgb.shape != hha.shape:
        raise ShapeMismatch(f"rgb {rgb.shape} and hha {hha.shape} differ")
    size = inputs[names[0]].shape[2:]

    def prefix(name):
        return "enc.rgb." if cfg.tie_streams else f"enc.{name}."

    feats = {n: inputs[n] for n in names}
    if cfg.stem_channels:
        feats = {n: stem_forward(x, params, prefix(n)) for n, x in feats.items()}

    stages: list[StageOutput] = []
    fused: list[Tensor] = []
    for i in range(len(cfg.channels)):
        raw = {n: stage_forward(x, params, f"{prefix(n)}s{i}.") for n, x in feats.items()}
        fusion_out = None
        out = dict(raw)
        if cfg.gate_mask[i]:
            gate_params = subparams(params, f"enc.gate{i}.")
            fusion_out = fuse(FeaturePair(raw["rgb"], raw["hha"]), gate_params, cfg.fusion)
            fused.append(fusion_out.merged)
            if cfg.bmp:
                out = {n: (raw[n] + fusion_out.merged) * 0.5 for n in names}
        stages.append(StageOutput(out.get("rgb"), out.get("hha"), raw.get("rgb"), raw.get("hha"), fusion_out))
        feats = out

    fused_low = fused[0] if fused else None
    fused_high = fused[-1] if fused else None
    return EncoderOutput(fused_low, fused_high, stages, (int(size[0]), int(size[1])))
