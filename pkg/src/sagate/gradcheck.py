"""End-to-end finite-difference check of the model gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .fusion import FUSION_KINDS, FusionConfig
from .model import ModelConfig, forward, init_model_params
from .train import TrainConfig, total_loss

DEFAULT_FLOOR = 1e-6
KINK_SHRINK = 1e-2


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries from dominating."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_gradient(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of the scalar function ``f`` w.r.t. every entry of ``x`` (mutated in place)."""
    return _central(f, x, h)[0]


def _same_masks(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _central(f, x: np.ndarray, h: float, indices=None):
    """Central differences plus a per-entry flag: did the step cross a ReLU kink?"""
    if not x.flags.c_contiguous:
        raise ValueError("finite differences need a contiguous array to perturb in place")
    g = np.zeros_like(x)
    kink = np.zeros(x.shape, dtype=bool)
    flat, gflat, kflat = x.reshape(-1), g.reshape(-1), kink.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        with ad.record_relu_masks() as up_masks:
            up = f()
        flat[i] = orig - h
        with ad.record_relu_masks() as down_masks:
            down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
        kflat[i] = not _same_masks(up_masks, down_masks)
    return g, kink


def toy_model(kind: str, num_classes: int = 3) -> ModelConfig:
    # three stages keep the deepest map at 2 x 2 for a 16 x 16 input, so every
    # normalisation sees more than one pixel
    # random spatial-gate init so the check does not sit at the symmetric 0.5 point
    enc = EncoderConfig(channels=(2, 3, 4), fusion=FusionConfig(kind=kind, gate_init="random"))
    return ModelConfig(enc, DecoderConfig(num_classes=num_classes, mid_channels=3))


@dataclass
class GradcheckReport:
    """``kinks`` counts entries whose +-h step changed a ReLU activation pattern.

    Central differences are meaningless across a kink, so those entries
    are re-measured with ``h * KINK_SHRINK`` (and skipped only if that step
    still straddles one, counted in ``unresolved``).
    """

    kind: str
    max_rel_error: float
    worst: str
    per_param: dict[str, float] = field(default_factory=dict)
    entries: int = 0
    kinks: int = 0
    unresolved: int = 0
    seconds: float = 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def check_model(kind: str, seed: int = 0, h: float = 1e-4, size: int = 16, num_classes: int = 3, floor: float = DEFAULT_FLOOR) -> GradcheckReport:
    """Compare backprop with central differences for every parameter entry (float64)."""
    start = time.perf_counter()
    cfg = toy_model(kind, num_classes)
    rng = np.random.default_rng(seed)
    tcfg = TrainConfig()
    with ad.default_dtype(np.float64):
        params = init_model_params(cfg, seed, np.float64)
        rgb = rng.standard_normal((1, 3, size, size))
        hha = rng.standard_normal((1, 3, size, size))
        labels = rng.integers(0, num_classes, size=(1, size, size))

        def loss_value():
            with ad.no_grad():
                logits, aux, _ = forward(params, cfg, Tensor(rgb), Tensor(hha))
                return total_loss(logits, aux, labels, tcfg)[0].item()

        logits, aux, _ = forward(params, cfg, Tensor(rgb), Tensor(hha))
        total_loss(logits, aux, labels, tcfg)[0].backward()
        report = {}
        entries = kinks = unresolved = 0
        for name, p in params.items():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            numeric, kink = _central(loss_value, p.data, h)
            if kink.any():
                idx = np.flatnonzero(kink)
                fine, still = _central(loss_value, p.data, h * KINK_SHRINK, idx)
                numeric.reshape(-1)[idx] = fine.reshape(-1)[idx]
                kinks += idx.size
                unresolved += int(still.sum())
                kink = still
            err = relative_error(analytic, numeric, floor)
            err[kink] = 0.0
            entries += err.size
            report[name] = float(err.max())
    worst = max(report, key=report.get)
    return GradcheckReport(kind, report[worst], worst, report, entries, kinks, unresolved, time.perf_counter() - start)


def check_all(seed: int = 0, h: float = 1e-4) -> list[GradcheckReport]:
    return [check_model(k, seed, h) for k in FUSION_KINDS]
