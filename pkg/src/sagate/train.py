"""Losses, SGD with momentum, poly learning-rate schedule and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import IGNORE_LABEL, Sample, stack_batch
from .errors import AllIgnored, Divergence
from .metrics import ConfusionMatrix
from .model import ModelConfig, forward, init_model_params

log = logging.getLogger(__name__)

MULTI_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    max_iter: int = 2000
    batch_size: int = 8
    aux_weight: float = 0.2
    ohem_enabled: bool = False
    ohem_keep: float = 0.25
    seed: int = 0
    eval_every: int = 0
    flip: bool = True
    scales: tuple[float, ...] = (1.0,)
    crop: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.ohem_keep <= 1:
            raise ValueError("ohem_keep must lie in (0, 1]")
        if self.max_iter < 1 or self.batch_size < 1:
            raise ValueError("max_iter and batch_size must be positive")
        if not self.scales or min(self.scales) <= 0:
            raise ValueError("scales must be positive")


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    frac = min(max(iteration / cfg.max_iter, 0.0), 1.0)
    return cfg.base_lr * (1.0 - frac) ** cfg.poly_power


# -- losses ------------------------------------------------------------------


def pixel_cross_entropy(logits: Tensor, labels, ignore_index: int = IGNORE_LABEL) -> tuple[Tensor, np.ndarray]:
    """Per-pixel ``-log softmax[true class]`` (N x H x W) and the valid-pixel mask."""
    labels = np.asarray(labels).astype(np.int64)
    n, k = logits.shape[:2]
    if labels.shape != (n,) + logits.shape[2:]:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore_index
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    safe = np.where(valid, labels, 0)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    onehot *= valid[:, None]
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    lse = ad.log(ad.exp(z).sum(axis=1, keepdims=True))
    nll = ((lse - z) * Tensor(onehot)).sum(axis=1)
    return nll, valid


def cross_entropy(logits: Tensor, labels, ignore_index: int = IGNORE_LABEL) -> Tensor:
    nll, valid = pixel_cross_entropy(logits, labels, ignore_index)
    count = int(valid.sum())
    if count == 0:
        raise AllIgnored("every pixel carries the ignore label")
    return nll.sum() * (1.0 / count)


def ohem_select(losses: np.ndarray, valid: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Flat indices of the hardest valid pixels; ties go to the lower index."""
    flat = losses.ravel()
    idx = np.flatnonzero(valid.ravel())
    if idx.size == 0:
        raise AllIgnored("every pixel carries the ignore label")
    keep = max(1, math.ceil(keep_fraction * idx.size))
    order = np.argsort(-flat[idx], kind="stable")
    return idx[order[:keep]]


def ohem_loss(logits: Tensor, labels, keep_fraction: float = 0.25, ignore_index: int = IGNORE_LABEL) -> Tensor:
    nll, valid = pixel_cross_entropy(logits, labels, ignore_index)
    chosen = ohem_select(nll.data, valid, keep_fraction)
    return nll.reshape(-1)[chosen].sum() * (1.0 / chosen.size)


def segmentation_loss(logits: Tensor, labels, cfg: TrainConfig) -> Tensor:
    if cfg.ohem_enabled:
        return ohem_loss(logits, labels, cfg.ohem_keep)
    return cross_entropy(logits, labels)


def total_loss(logits: Tensor, aux: Tensor | None, labels, cfg: TrainConfig) -> tuple[Tensor, Tensor, Tensor | None]:
    """``main + aux_weight * aux``; returns ``(total, main, aux)``."""
    main = segmentation_loss(logits, labels, cfg)
    if aux is None or cfg.aux_weight == 0:
        return main, main, None
    aux_loss = segmentation_loss(aux, labels, cfg)
    return main + aux_loss * cfg.aux_weight, main, aux_loss


# -- optimiser ------------------------------------------------------------------


def sgd_step(params: dict, grads: dict, state: dict, cfg: TrainConfig, iteration: int) -> tuple[dict, dict]:
    """Momentum SGD with weight decay folded into the velocity.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    """
    lr = poly_lr(iteration, cfg)
    new_params, new_state = {}, {}
    for name, p in params.items():
        if not p.requires_grad:
            new_params[name] = p
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        v = state.get(name)
        v = g + cfg.weight_decay * p.data if v is None else cfg.momentum * v + g + cfg.weight_decay * p.data
        v = v.astype(p.dtype, copy=False)
        new_state[name] = v
        new_params[name] = Tensor((p.data - lr * v).astype(p.dtype), requires_grad=True)
    return new_params, new_state


# -- augmentation -------------------------------------------------------------------


def _nearest_resize(labels: np.ndarray, size) -> np.ndarray:
    h, w = labels.shape[-2:]
    ys = np.minimum(((np.arange(size[0]) + 0.5) * h / size[0]).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(size[1]) + 0.5) * w / size[1]).astype(np.int64), w - 1)
    return labels[..., ys[:, None], xs[None, :]]


def augment_batch(rgb, hha, labels, cfg: TrainConfig, rng: np.random.Generator):
    """Random flip and scale-then-crop, applied identically to all three maps.

    HHA channels are mirrored spatially only; their values are unchanged.
    """
    n, _, h, w = rgb.shape
    crop = cfg.crop or h
    crop_w = cfg.crop or w
    out_rgb = np.zeros((n, rgb.shape[1], crop, crop_w), dtype=rgb.dtype)
    out_hha = np.zeros((n, hha.shape[1], crop, crop_w), dtype=hha.dtype)
    out_lab = np.full((n, crop, crop_w), IGNORE_LABEL, dtype=labels.dtype)
    for i in range(n):
        r, d, lab = rgb[i], hha[i], labels[i]
        if cfg.flip and rng.random() < 0.5:
            r, d, lab = r[..., ::-1], d[..., ::-1], lab[..., ::-1]
        s = cfg.scales[rng.integers(len(cfg.scales))] if len(cfg.scales) > 1 else cfg.scales[0]
        if s != 1.0:
            size = (max(1, int(round(h * s))), max(1, int(round(w * s))))
            r = nn.resize_array(np.ascontiguousarray(r), size)
            d = nn.resize_array(np.ascontiguousarray(d), size)
            lab = _nearest_resize(np.ascontiguousarray(lab), size)
        sh, sw = lab.shape
        top = int(rng.integers(0, sh - crop + 1)) if sh > crop else 0
        left = int(rng.integers(0, sw - crop_w + 1)) if sw > crop_w else 0
        ch, cw = min(crop, sh), min(crop_w, sw)
        out_rgb[i, :, :ch, :cw] = r[:, top : top + ch, left : left + cw]
        out_hha[i, :, :ch, :cw] = d[:, top : top + ch, left : left + cw]
        out_lab[i, :ch, :cw] = lab[top : top + ch, left : left + cw]
    return out_rgb, out_hha, out_lab


# -- evaluation ------------------------------------------------------------------------


def _inputs(cfg: ModelConfig, rgb, hha):
    mod = cfg.encoder.modality
    r = Tensor(rgb) if mod in ("both", "rgb") else None
    d = Tensor(hha) if mod in ("both", "hha") else None
    return r, d


def predict_logits(params, cfg: ModelConfig, rgb: np.ndarray, hha: np.ndarray, flip: bool = False) -> np.ndarray:
    with ad.no_grad():
        logits, _, _ = forward(params, cfg, *_inputs(cfg, rgb, hha))
        out = logits.data
        if flip:
            flipped, _, _ = forward(params, cfg, *_inputs(cfg, rgb[..., ::-1].copy(), hha[..., ::-1].copy()))
            out = 0.5 * (out + flipped.data[..., ::-1])
    return out


def evaluate(params, cfg: ModelConfig, samples: Sequence[Sample], batch_size: int = 16, flip: bool = False) -> ConfusionMatrix:
    cm = ConfusionMatrix(cfg.decoder.num_classes)
    for start in range(0, len(samples), batch_size):
        rgb, hha, labels = stack_batch(list(samples[start : start + batch_size]))
        logits = predict_logits(params, cfg, rgb, hha, flip)
        cm.accumulate(logits.argmax(axis=1), labels)
    return cm


# -- training loop -----------------------------------------------------------------------

HISTORY_FIELDS = ("iter", "lr", "loss", "aux_loss", "miou")


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    best_miou: float | None
    history: list[dict] = field(default_factory=list)


def _snapshot(params):
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in params.items()}


def train_loop(
    model_cfg: ModelConfig,
    train_samples: Sequence[Sample],
    cfg: TrainConfig,
    eval_samples: Sequence[Sample] | None = None,
    params: dict | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``cfg.max_iter`` SGD steps; evaluate every ``cfg.eval_every`` epochs and at the end."""
    if params is None:
        params = init_model_params(model_cfg, cfg.seed)
    n = len(train_samples)
    if n == 0:
        raise ValueError("empty training set")
    per_epoch = math.ceil(n / cfg.batch_size)
    state: dict = {}
    history: list[dict] = []
    best, best_miou = _snapshot(params), None
    rgb_all, hha_all, lab_all = stack_batch(list(train_samples))
    order = np.arange(n)
    for it in range(cfg.max_iter):
        epoch, slot = divmod(it, per_epoch)
        if slot == 0:
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        idx = order[slot * cfg.batch_size : (slot + 1) * cfg.batch_size]
        aug_rng = np.random.default_rng([cfg.seed, epoch, slot, 1])
        rgb, hha, labels = augment_batch(rgb_all[idx], hha_all[idx], lab_all[idx], cfg, aug_rng)
        logits, aux, _ = forward(params, model_cfg, *_inputs(model_cfg, rgb, hha))
        total, main, aux_loss = total_loss(logits, aux, labels, cfg)
        value = total.item()
        if not math.isfinite(value):
            raise Divergence(f"loss became {value} at iteration {it}")
        total.backward()
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        lr = poly_lr(it, cfg)
        params, state = sgd_step(params, grads, state, cfg, it)
        row = {"iter": it, "lr": lr, "loss": main.item(), "aux_loss": aux_loss.item() if aux_loss is not None else float("nan"), "miou": None}
        last = it == cfg.max_iter - 1
        epoch_end = slot == per_epoch - 1
        if eval_samples and (last or (cfg.eval_every and epoch_end and (epoch + 1) % cfg.eval_every == 0)):
            score = evaluate(params, model_cfg, eval_samples).miou()
            row["miou"] = score
            if best_miou is None or score > best_miou:
                best, best_miou = _snapshot(params), score
            log.info("iter %d loss %.4f miou %.4f", it, row["loss"], score)
        history.append(row)
        if on_step is not None:
            on_step(row)
    if best_miou is None:
        best = _snapshot(params)
    return TrainResult(params, best, best_miou, history)


def history_csv(history: Sequence[dict]) -> str:
    lines = [",".join(HISTORY_FIELDS)]
    for row in history:
        cells = [str(row["iter"]), f"{row['lr']:.8g}", f"{row['loss']:.8g}"]
        aux = row["aux_loss"]
        cells.append("" if aux is None or not math.isfinite(aux) else f"{aux:.8g}")
        cells.append("" if row["miou"] is None else f"{row['miou']:.6f}")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
