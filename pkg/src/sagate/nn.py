"""Differentiable layers built from the autodiff primitives."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateOutput, ShapeMismatch

NORM_EPS = 1e-5


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N x C x H x W) with ``weight`` (C_out x C x k x k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d wants 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ShapeMismatch(f"input has {c} channels, weight expects {c_in}")
    if kh != kw:
        raise ShapeMismatch("only square kernels are supported")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DegenerateOutput(f"conv output would be {ho}x{wo} for input {h}x{w}")
    if kh == 1 and stride == 1 and padding == 0:
        cols = x.reshape(n, c, h * w)
    else:
        cols = ad.unfold2d(x, kh, stride, padding)
    out = ad.matmul(weight.reshape(c_out, c_in * kh * kw), cols).reshape(n, c_out, ho, wo)
    if bias is not None:
        out = out + bias.reshape(1, c_out, 1, 1)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool wants N x C x H x W, got {x.shape}")
    return x.mean(axis=(2, 3))


def sigmoid(x: Tensor) -> Tensor:
    return ad.sigmoid(x)


def relu(x: Tensor) -> Tensor:
    return ad.relu(x)


def softmax_pair(g_a: Tensor, g_b: Tensor) -> tuple[Tensor, Tensor]:
    """Two-way softmax over a pair of same-shaped logit maps.

    The pointwise max is subtracted first (as a constant; the softmax is
    shift-invariant so no gradient flows through it).
    """
    if g_a.shape != g_b.shape:
        raise ShapeMismatch(f"softmax_pair shapes differ: {g_a.shape} vs {g_b.shape}")
    shift = Tensor(np.maximum(g_a.data, g_b.data))
    e_a = ad.exp(g_a - shift)
    e_b = ad.exp(g_b - shift)
    total = e_a + e_b
    return e_a / total, e_b / total


def mlp_hidden(d_in: int, ratio: float) -> int:
    return max(1, int(math.floor(d_in / ratio + 0.5)))


def mlp_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """One hidden ReLU layer. ``x`` is N x d_in, weights are (out x in)."""
    if x.shape[-1] != w1.shape[1]:
        raise ShapeMismatch(f"mlp input width {x.shape[-1]} != {w1.shape[1]}")
    hidden = ad.relu(ad.matmul(x, w1.T) + b1)
    return ad.matmul(hidden, w2.T) + b2


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = ad.matmul(x, weight.T)
    return out if bias is None else out + bias


def channel_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = NORM_EPS) -> Tensor:
    """Normalise each (sample, channel) plane over H x W, then apply a per-channel affine."""
    if x.ndim != 4:
        raise ShapeMismatch(f"channel_norm wants N x C x H x W, got {x.shape}")
    c = x.shape[1]
    centred = x - x.mean(axis=(2, 3), keepdims=True)
    var = (centred * centred).mean(axis=(2, 3), keepdims=True)
    out = centred * (var + eps) ** -0.5
    if gamma is not None:
        out = out * gamma.reshape(1, c, 1, 1)
    if beta is not None:
        out = out + beta.reshape(1, c, 1, 1)
    return out


def bilinear_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic ``out_size x in_size`` interpolation matrix.

    Half-pixel (align_corners=False) convention: output index ``i`` samples
    source coordinate ``(i + 0.5) * in/out - 0.5``, clamped below at 0, and
    the upper neighbour index is clamped at ``in_size - 1``.
    """
    mat = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        mat[i, i0] += 1.0 - frac
        mat[i, i1] += frac
    return mat


_MATRIX_CACHE: dict[tuple, np.ndarray] = {}


def _cached_matrix(in_size, out_size, dtype):
    key = (in_size, out_size, np.dtype(dtype).str)
    mat = _MATRIX_CACHE.get(key)
    if mat is None:
        mat = bilinear_matrix(in_size, out_size).astype(dtype)
        mat.setflags(write=False)
        _MATRIX_CACHE[key] = mat
    return mat


def bilinear_resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Resize the trailing two axes of ``x`` to ``size`` (separable bilinear)."""
    h, w = x.shape[-2:]
    oh, ow = size
    if oh < 1 or ow < 1:
        raise DegenerateOutput(f"cannot resize to {size}")
    out = x
    if oh != h:
        out = ad.matmul(Tensor(_cached_matrix(h, oh, x.dtype)), out)
    if ow != w:
        out = ad.matmul(out, Tensor(np.ascontiguousarray(_cached_matrix(w, ow, x.dtype).T)))
    return out


bilinear_upsample = bilinear_resize


def resize_array(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a plain array over its last two axes."""
    h, w = arr.shape[-2:]
    ry = bilinear_matrix(h, size[0]).astype(arr.dtype)
    rx = bilinear_matrix(w, size[1]).astype(arr.dtype)
    return np.matmul(np.matmul(ry, arr), rx.T)


# -- initialisers ------------------------------------------------------------


def he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int, dtype=None) -> Tensor:
    std = math.sqrt(2.0 / (c_in * k * k))
    data = rng.normal(0.0, std, size=(c_out, c_in, k, k))
    return Tensor(data.astype(dtype or ad.get_default_dtype()), requires_grad=True)


def he_linear(rng: np.random.Generator, d_out: int, d_in: int, dtype=None) -> Tensor:
    std = math.sqrt(2.0 / d_in)
    return Tensor(rng.normal(0.0, std, size=(d_out, d_in)).astype(dtype or ad.get_default_dtype()), requires_grad=True)


def param_zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or ad.get_default_dtype()), requires_grad=True)


def param_ones(shape, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or ad.get_default_dtype()), requires_grad=True)
