"""Separation-and-Aggregation gating and its ablation variants.

Feature separation (FS) squeezes both modalities into one cross-modal
descriptor, turns it into a sigmoid channel gate per modality, and adds each
filtered map onto the *other* modality's input (recalibration). Feature
aggregation (FA) maps the concatenated recalibrated features to two spatial
logit maps, takes their pairwise softmax, and blends the original inputs.

Parameter names used inside one gate::

    fs.w1 fs.b1 fs.w2 fs.b2          shared MLP, 2C -> h -> 2C
    fs.rgb.* / fs.hha.*              per-direction MLPs (unshared or self-global)
    fa.rgb.weight fa.hha.weight      1 x 2C x 1 x 1 spatial gate convs, no bias
    fa.merge.weight fa.merge.bias    C x 2C x 1 x 1, "conv" variant only
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ShapeMismatch, UnknownVariant

FUSION_KINDS = ("proposed", "concat", "self-global", "cross-global", "product", "addition", "conv")

# variants that keep the FA softmax gate
_GATED = {"proposed", "concat", "self-global", "cross-global", "product"}


@dataclass(frozen=True)
class FusionConfig:
    kind: str = "proposed"
    shared_mlp: bool = True
    mlp_ratio: float = 2.0
    blend_recalibrated: bool = False
    gate_init: str = "zero"

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise UnknownVariant(self.kind)
        if self.gate_init not in ("zero", "random"):
            raise ValueError(f"gate_init must be 'zero' or 'random', got {self.gate_init!r}")


@dataclass
class FeaturePair:
    rgb: Tensor
    hha: Tensor

    def __post_init__(self):
        if self.rgb.shape != self.hha.shape:
            raise ShapeMismatch(f"modality shapes differ: {self.rgb.shape} vs {self.hha.shape}")
        if self.rgb.ndim != 4 or min(self.rgb.shape[1:]) < 1:
            raise ShapeMismatch(f"feature maps must be N x C x H x W, got {self.rgb.shape}")

    @property
    def channels(self) -> int:
        return self.rgb.shape[1]


@dataclass
class GateVector:
    w_rgb: Tensor
    w_hha: Tensor


@dataclass
class SeparationOutput:
    rgb_filtered: Tensor
    hha_filtered: Tensor
    rgb_rec: Tensor
    hha_rec: Tensor
    descriptor: Tensor
    weights: GateVector


@dataclass
class SpatialGate:
    a_rgb: Tensor
    a_hha: Tensor
    g_rgb: Tensor
    g_hha: Tensor


@dataclass
class FusionOutput:
    merged: Tensor
    gate: SpatialGate | None
    separation: SeparationOutput | None


# -- parameters ---------------------------------------------------------------


def _mlp_params(rng, d_in, d_out, ratio, prefix, dtype):
    h = nn.mlp_hidden(d_in, ratio)
    return {
        f"{prefix}w1": nn.he_linear(rng, h, d_in, dtype),
        f"{prefix}b1": nn.param_zeros((h,), dtype),
        f"{prefix}w2": nn.he_linear(rng, d_out, h, dtype),
        f"{prefix}b2": nn.param_zeros((d_out,), dtype),
    }


def init_fusion_params(rng: np.random.Generator, channels: int, cfg: FusionConfig, dtype=None) -> dict[str, Tensor]:
    c = channels
    params: dict[str, Tensor] = {}
    if cfg.kind == "self-global":
        params.update(_mlp_params(rng, c, c, cfg.mlp_ratio, "fs.rgb.", dtype))
        params.update(_mlp_params(rng, c, c, cfg.mlp_ratio, "fs.hha.", dtype))
    elif cfg.kind != "concat":
        if cfg.shared_mlp:
            params.update(_mlp_params(rng, 2 * c, 2 * c, cfg.mlp_ratio, "fs.", dtype))
        else:
            params.update(_mlp_params(rng, 2 * c, c, cfg.mlp_ratio, "fs.rgb.", dtype))
            params.update(_mlp_params(rng, 2 * c, c, cfg.mlp_ratio, "fs.hha.", dtype))
    if cfg.kind in _GATED:
        for side in ("rgb", "hha"):
            if cfg.gate_init == "zero":
                params[f"fa.{side}.weight"] = nn.param_zeros((1, 2 * c, 1, 1), dtype)
            else:
                params[f"fa.{side}.weight"] = nn.he_conv(rng, 1, 2 * c, 1, dtype)
    elif cfg.kind == "conv":
        params["fa.merge.weight"] = nn.he_conv(rng, c, 2 * c, 1, dtype)
        params["fa.merge.bias"] = nn.param_zeros((c,), dtype)
    return params


def count_params(params: Mapping[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


def _mlp(params, prefix, x):
    return nn.mlp_forward(x, params[prefix + "w1"], params[prefix + "b1"], params[prefix + "w2"], params[prefix + "b2"])


def _channel_scale(x: Tensor, w: Tensor) -> Tensor:
    n, c = w.shape
    return x * w.reshape(n, c, 1, 1)


# -- feature separation ---------------------------------------------------------


def channel_weights(pair: FeaturePair, params, cfg: FusionConfig) -> tuple[GateVector, Tensor]:
    """Sigmoid channel gates and the pooled descriptor they came from."""
    c = pair.channels
    if cfg.kind == "self-global":
        d_rgb = nn.global_avg_pool(pair.rgb)
        d_hha = nn.global_avg_pool(pair.hha)
        w_rgb = nn.sigmoid(_mlp(params, "fs.rgb.", d_rgb))
        w_hha = nn.sigmoid(_mlp(params, "fs.hha.", d_hha))
        return GateVector(w_rgb, w_hha), ad.concat([d_rgb, d_hha], axis=1)
    descriptor = nn.global_avg_pool(ad.concat([pair.rgb, pair.hha], axis=1))
    if "fs.w1" in params:
        w = nn.sigmoid(_mlp(params, "fs.", descriptor))
        w_rgb, w_hha = w[:, :c], w[:, c:]
    else:
        w_rgb = nn.sigmoid(_mlp(params, "fs.rgb.", descriptor))
        w_hha = nn.sigmoid(_mlp(params, "fs.hha.", descriptor))
    return GateVector(w_rgb, w_hha), descriptor


def feature_separation(pair: FeaturePair, params, cfg: FusionConfig = FusionConfig()) -> SeparationOutput:
    """Filter each modality by its channel gate, then recalibrate.

    The recalibration rule depends on ``cfg.kind``: the proposed, addition,
    conv and self-global variants add each filtered map to the opposite
    modality; cross-global adds it back to its own modality; product
    multiplies instead of adding.
    """
    weights, descriptor = channel_weights(pair, params, cfg)
    rgb_f = _channel_scale(pair.rgb, weights.w_rgb)
    hha_f = _channel_scale(pair.hha, weights.w_hha)
    if cfg.kind == "cross-global":
        rgb_rec, hha_rec = rgb_f + pair.rgb, hha_f + pair.hha
    elif cfg.kind == "product":
        rgb_rec, hha_rec = pair.rgb * hha_f, pair.hha * rgb_f
    else:
        rgb_rec, hha_rec = hha_f + pair.rgb, rgb_f + pair.hha
    return SeparationOutput(rgb_f, hha_f, rgb_rec, hha_rec, descriptor, weights)


# -- feature aggregation ----------------------------------------------------------


def spatial_gate(rgb_feat: Tensor, hha_feat: Tensor, params) -> SpatialGate:
    stacked = ad.concat([rgb_feat, hha_feat], axis=1)
    g_rgb = nn.conv2d(stacked, params["fa.rgb.weight"])
    g_hha = nn.conv2d(stacked, params["fa.hha.weight"])
    a_rgb, a_hha = nn.softmax_pair(g_rgb, g_hha)
    return SpatialGate(a_rgb, a_hha, g_rgb, g_hha)


def feature_aggregation(pair: FeaturePair, sep: SeparationOutput | None, params, cfg: FusionConfig = FusionConfig()) -> FusionOutput:
    """Gate from the recalibrated maps (or raw inputs when ``sep`` is None) and blend."""
    rgb_feat, hha_feat = (pair.rgb, pair.hha) if sep is None else (sep.rgb_rec, sep.hha_rec)
    if rgb_feat.shape != pair.rgb.shape:
        raise ShapeMismatch("separation output does not match the input pair")
    gate = spatial_gate(rgb_feat, hha_feat, params)
    if cfg.blend_recalibrated and sep is not None:
        src_rgb, src_hha = sep.rgb_rec, sep.hha_rec
    else:
        src_rgb, src_hha = pair.rgb, pair.hha
    merged = src_rgb * gate.a_rgb + src_hha * gate.a_hha
    return FusionOutput(merged, gate, sep)


def sa_gate(pair: FeaturePair, params, cfg: FusionConfig = FusionConfig()) -> FusionOutput:
    if cfg.kind != "proposed":
        cfg = replace(cfg, kind="proposed")
    return feature_aggregation(pair, feature_separation(pair, params, cfg), params, cfg)


def fusion_variant(kind: str, pair: FeaturePair, params, cfg: FusionConfig | None = None) -> FusionOutput:
    if kind not in FUSION_KINDS:
        raise UnknownVariant(kind)
    cfg = FusionConfig(kind=kind) if cfg is None else replace(cfg, kind=kind)
    if kind == "concat":
        return feature_aggregation(pair, None, params, cfg)
    sep = feature_separation(pair, params, cfg)
    if kind in _GATED:
        return feature_aggregation(pair, sep, params, cfg)
    if kind == "addition":
        return FusionOutput(sep.rgb_rec + sep.hha_rec, None, sep)
    stacked = ad.concat([sep.rgb_rec, sep.hha_rec], axis=1)
    merged = nn.conv2d(stacked, params["fa.merge.weight"], params["fa.merge.bias"])
    return FusionOutput(merged, None, sep)


def fuse(pair: FeaturePair, params, cfg: FusionConfig) -> FusionOutput:
    return fusion_variant(cfg.kind, pair, params, cfg)


# -- modality swap (symmetry checks) ------------------------------------------------


def _swap_halves(arr: np.ndarray, axis: int) -> np.ndarray:
    a, b = np.split(arr, 2, axis=axis)
    return np.concatenate([b, a], axis=axis)


def swap_modality_params(params: Mapping[str, Tensor], cfg: FusionConfig) -> dict[str, Tensor]:
    """Parameters that make the gate behave identically with the modalities exchanged."""
    out: dict[str, Tensor] = {}
    cross_input = cfg.kind != "self-global"
    for name, value in params.items():
        arr = value.data
        target = name
        if name.startswith("fs.rgb.") or name.startswith("fs.hha."):
            side = name[3:6]
            target = name.replace(f"fs.{side}.", f"fs.{'hha' if side == 'rgb' else 'rgb'}.")
            if name.endswith("w1") and cross_input:
                arr = _swap_halves(arr, 1)
        elif name == "fs.w1":
            arr = _swap_halves(arr, 1)
        elif name == "fs.w2":
            arr = _swap_halves(arr, 0)
        elif name == "fs.b2":
            arr = _swap_halves(arr, 0)
        elif name in ("fa.rgb.weight", "fa.hha.weight"):
            target = "fa.hha.weight" if name == "fa.rgb.weight" else "fa.rgb.weight"
            arr = _swap_halves(arr, 1)
        elif name == "fa.merge.weight":
            arr = _swap_halves(arr, 1)
        out[target] = Tensor(arr.copy(), requires_grad=value.requires_grad)
    return out
