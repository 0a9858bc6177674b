"""Procedural RGB-D segmentation scenes and the HHA noise protocol.

Scenes are a tilted background plane with axis-aligned rectangles and
ellipses on it. Each foreground class has a *visibility*:

* ``rgb``   - coloured, coplanar with the background (invisible in depth),
* ``depth`` - a raised fronto-parallel surface that keeps the background
  colour and texture exactly (invisible in RGB),
* ``both``  - coloured and raised.

All randomness comes from :class:`SplitMix64`, a counter-based 64-bit
generator, so ``(recipe, index)`` maps to the same bytes everywhere.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io
from .errors import RecipeInfeasible
from .hha import DepthFrame, encode_hha

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
IGNORE_LABEL = 255

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, index: int) -> int:
    """Independent stream seed for item ``index`` of run ``seed``."""
    return mix64(mix64(seed) ^ ((index + 1) * GOLDEN_GAMMA))


class SplitMix64:
    """SplitMix64 (Steele, Lea, Flood 2014) with vectorised draws."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA)
        out = _mix64_array(steps + np.uint64(self.state))
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return out

    def uniform(self, n: int | None = None):
        """Floats in [0, 1) with 53 random bits."""
        k = 1 if n is None else n
        u = (self.next_u64(k) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(u[0]) if n is None else u

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in ``[lo, hi]``."""
        return lo + min(int(self.uniform() * (hi - lo + 1)), hi - lo)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller."""
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]


VISIBILITIES = ("rgb", "depth", "both")

# saturated class colours; the background is a dull near-grey
PALETTE = np.array(
    [
        [0.85, 0.20, 0.20],
        [0.20, 0.75, 0.25],
        [0.20, 0.30, 0.85],
        [0.85, 0.75, 0.15],
        [0.70, 0.20, 0.75],
        [0.15, 0.75, 0.80],
    ]
)


@dataclass(frozen=True)
class SceneRecipe:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    visibility: tuple[str, ...] = ("rgb", "depth", "both")
    objects_min: int = 3
    objects_max: int = 5
    object_size: tuple[float, float] = (0.18, 0.38)
    confusability: float = 0.0
    depth_step: float = 0.4
    background_depth: float = 3.0
    tilt: float = 0.4
    texture: float = 0.08
    depth_noise: float = 0.0
    rgb_degraded_fraction: float = 0.0
    rgb_degraded_confusability: float = 0.85
    hha_degraded_fraction: float = 0.0
    hha_degraded_std: float = 60.0
    complementary: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "visibility", tuple(self.visibility))
        object.__setattr__(self, "object_size", tuple(float(s) for s in self.object_size))
        if len(self.visibility) != self.num_classes - 1:
            raise ValueError(f"need one visibility per foreground class ({self.num_classes - 1}), got {len(self.visibility)}")
        bad = [v for v in self.visibility if v not in VISIBILITIES]
        if bad:
            raise ValueError(f"unknown visibility {bad}")
        if self.complementary and not {"rgb", "depth"} <= set(self.visibility):
            raise ValueError("a complementary recipe needs at least one rgb-only and one depth-only class")
        if not 0 <= self.objects_min <= self.objects_max:
            raise ValueError("objects_min must be in [0, objects_max]")
        if not 0.0 <= self.confusability <= 1.0:
            raise ValueError("confusability must lie in [0, 1]")
        if self.rgb_degraded_fraction < 0 or self.hha_degraded_fraction < 0 or self.rgb_degraded_fraction + self.hha_degraded_fraction > 1:
            raise ValueError("degraded-frame fractions must be non-negative and sum to at most 1")
        if self.depth_step <= 0 or self.background_depth <= 0:
            raise ValueError("depths must be positive")
        if self.num_classes - 1 > len(PALETTE):
            raise ValueError(f"at most {len(PALETTE) + 1} classes supported")

    def classes_with(self, visibility: str) -> list[int]:
        return [i + 1 for i, v in enumerate(self.visibility) if v == visibility]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["visibility"] = list(self.visibility)
        d["object_size"] = list(self.object_size)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Sample:
    rgb: np.ndarray
    depth: DepthFrame
    hha: np.ndarray
    labels: np.ndarray
    index: int = 0

    def copy(self) -> "Sample":
        frame = replace(self.depth, depth=self.depth.depth.copy(), valid_mask=self.depth.valid_mask.copy())
        return Sample(self.rgb.copy(), frame, self.hha.copy(), self.labels.copy(), self.index)


@dataclass
class SceneLayers:
    """Intermediate renders, exposed for verifying the generator."""

    background_rgb: np.ndarray
    background_depth: np.ndarray
    objects: list[dict] = field(default_factory=list)


def _quantise(rgb: np.ndarray) -> np.ndarray:
    return (np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5) / 255.0).astype(np.float32)


def _shape_mask(kind: str, top: int, left: int, h: int, w: int, shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    if kind == "rect":
        mask[top : top + h, left : left + w] = True
        return mask
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    inside = ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0
    mask[top : top + h, left : left + w] = inside
    return mask


def _place_objects(recipe: SceneRecipe, rng: SplitMix64) -> list[dict]:
    h, w = recipe.height, recipe.width
    count = rng.integer(recipe.objects_min, recipe.objects_max)
    n_fg = recipe.num_classes - 1
    order = list(range(1, n_fg + 1))
    for i in range(len(order) - 1, 0, -1):
        j = rng.integer(0, i)
        order[i], order[j] = order[j], order[i]
    occupied = np.zeros((h, w), dtype=bool)
    objects = []
    lo, hi = recipe.object_size
    for k in range(count):
        cls = order[k] if k < n_fg else rng.integer(1, n_fg)
        for _attempt in range(200):
            oh = max(2, int(round(h * (lo + (hi - lo) * rng.uniform()))))
            ow = max(2, int(round(w * (lo + (hi - lo) * rng.uniform()))))
            oh, ow = min(oh, h), min(ow, w)
            top = rng.integer(0, h - oh)
            left = rng.integer(0, w - ow)
            kind = "rect" if rng.uniform() < 0.5 else "ellipse"
            mask = _shape_mask(kind, top, left, oh, ow, (h, w))
            # one-pixel clearance keeps objects from touching
            grown = mask.copy()
            grown[1:, :] |= mask[:-1, :]
            grown[:-1, :] |= mask[1:, :]
            grown[:, 1:] |= mask[:, :-1]
            grown[:, :-1] |= mask[:, 1:]
            if not (grown & occupied).any() and mask.any():
                occupied |= mask
                objects.append({"class": cls, "kind": kind, "mask": mask, "box": (top, left, oh, ow)})
                break
        else:
            # the first n_fg objects carry one instance of every class; extras are best effort
            if k >= n_fg:
                break
            raise RecipeInfeasible(f"could not place object {k + 1} of {count} without overlap")
    return objects


def generate_sample(recipe: SceneRecipe, index: int, return_layers: bool = False):
    rng = SplitMix64(derive_seed(recipe.seed, index))
    h, w = recipe.height, recipe.width
    f = float(w)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    bg_color = 0.35 + 0.3 * rng.uniform(3)
    texture = (rng.uniform(h * w * 3).reshape(3, h, w) - 0.5) * 2.0 * recipe.texture
    tilt = recipe.tilt * (0.5 + rng.uniform())
    v = np.arange(h, dtype=np.float64)[:, None]
    bg_depth = np.broadcast_to(recipe.background_depth / (1.0 + tilt * (v - cy) / f), (h, w)).copy()
    bg_rgb = _quantise(bg_color[:, None, None] + texture)

    objects = _place_objects(recipe, rng)
    rgb = bg_rgb.copy()
    depth = bg_depth.copy()
    labels = np.zeros((h, w), dtype=np.uint8)
    u = rng.uniform()
    rgb_degraded = u < recipe.rgb_degraded_fraction
    hha_degraded = not rgb_degraded and u < recipe.rgb_degraded_fraction + recipe.hha_degraded_fraction
    confusability = max(recipe.confusability, recipe.rgb_degraded_confusability) if rgb_degraded else recipe.confusability
    mix = 1.0 - confusability
    for obj in objects:
        cls, mask = obj["class"], obj["mask"]
        vis = recipe.visibility[cls - 1]
        if vis in ("rgb", "both"):
            color = bg_color + mix * (PALETTE[cls - 1] - bg_color)
            shaded = _quantise(color[:, None, None] + texture)
            rgb[:, mask] = shaded[:, mask]
        if vis in ("depth", "both"):
            step = recipe.depth_step * (1.0 + 0.5 * rng.uniform())
            front = bg_depth[mask].min() - step
            depth[mask] = max(front, 0.05 * recipe.background_depth)
        labels[mask] = cls
        obj["visibility"] = vis

    if recipe.depth_noise > 0:
        depth = np.maximum(depth + recipe.depth_noise * rng.normal(h * w).reshape(h, w), 1e-3)

    frame = DepthFrame(depth, f, f, cx, cy, gravity=np.array([0.0, 1.0, 0.0]))
    hha = encode_hha(frame)
    if hha_degraded:
        noise = recipe.hha_degraded_std / 255.0 * rng.normal(hha.size).reshape(hha.shape)
        hha = np.clip(hha + noise, 0.0, 1.0).astype(np.float32)
    sample = Sample(rgb, frame, hha, labels, index)
    if return_layers:
        return sample, SceneLayers(bg_rgb, bg_depth, objects)
    return sample


def generate(recipe: SceneRecipe, n: int, start: int = 0) -> list[Sample]:
    return [generate_sample(recipe, start + i) for i in range(n)]


# -- noise protocol ------------------------------------------------------------


def gaussian_noise(shape, std: float, seed: int) -> np.ndarray:
    size = int(np.prod(shape))
    return (std * SplitMix64(seed).normal(size)).reshape(shape)


def corrupt_depth(sample: Sample, std: float, seed: int, target: str = "hha") -> Sample:
    """Add N(0, std) noise expressed on the 0-255 scale.

    ``target="hha"`` perturbs the HHA map (``std / 255`` in [0, 1] units,
    then clamps). ``target="depth"`` perturbs raw depth by the same fraction
    of the frame's valid depth range and re-encodes HHA.
    """
    if std < 0:
        raise ValueError("std must be non-negative")
    out = sample.copy()
    if std == 0:
        return out
    stream = derive_seed(seed, sample.index)
    if target == "hha":
        noise = gaussian_noise(out.hha.shape, std / 255.0, stream)
        out.hha = np.clip(out.hha + noise, 0.0, 1.0).astype(np.float32)
    elif target == "depth":
        frame = out.depth
        valid = frame.valid_mask
        span = float(frame.depth[valid].max() - frame.depth[valid].min()) or 1.0
        noise = gaussian_noise(frame.depth.shape, std / 255.0 * span, stream)
        frame.depth = np.where(valid, np.maximum(frame.depth + noise, 1e-3), frame.depth)
        out.hha = encode_hha(frame)
    else:
        raise ValueError(f"unknown corruption target {target!r}")
    return out


STANDARD_NOISE_STDS = (10, 40, 80, 120)


# -- shard IO ---------------------------------------------------------------------


def save_shard(samples: list[Sample], directory, recipe: SceneRecipe | None = None) -> Path:
    root = io.ensure_dir(directory)
    entries = []
    for s in samples:
        sid = f"{s.index:05d}"
        files = {
            "rgb": f"{sid}.rgb.stns",
            "hha": f"{sid}.hha.stns",
            "depth": f"{sid}.depth.stns",
            "valid": f"{sid}.valid.pgm",
            "labels": f"{sid}.labels.pgm",
            "preview": f"{sid}.rgb.ppm",
        }
        io.save_stns(root / files["rgb"], s.rgb.astype(np.float32))
        io.save_stns(root / files["hha"], s.hha.astype(np.float32))
        io.save_stns(root / files["depth"], s.depth.depth.astype(np.float64))
        io.write_pgm(root / files["valid"], s.depth.valid_mask.astype(np.uint8) * 255)
        io.write_pgm(root / files["labels"], s.labels.astype(np.uint8))
        io.write_ppm(root / files["preview"], io.to_uint8(s.rgb.transpose(1, 2, 0)))
        frame = s.depth
        entries.append(
            {
                "id": sid,
                "index": s.index,
                "files": files,
                "intrinsics": [frame.fx, frame.fy, frame.cx, frame.cy],
                "gravity": [float(g) for g in frame.gravity],
            }
        )
    manifest = {
        "format": "sagate-shard",
        "version": 1,
        "recipe": recipe.to_dict() if recipe else None,
        "recipe_hash": recipe.hash() if recipe else None,
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_shard(directory) -> tuple[list[Sample], dict]:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    samples = []
    for e in manifest["samples"]:
        files = e["files"]
        fx, fy, cx, cy = e["intrinsics"]
        valid = io.read_pgm(root / files["valid"]) > 0
        frame = DepthFrame(io.load_stns(root / files["depth"]), fx, fy, cx, cy, np.array(e["gravity"]), valid)
        samples.append(
            Sample(
                io.load_stns(root / files["rgb"]),
                frame,
                io.load_stns(root / files["hha"]),
                io.read_pgm(root / files["labels"]),
                int(e["index"]),
            )
        )
    return samples, manifest


def recipe_from_dict(d: dict) -> SceneRecipe:
    d = dict(d)
    d["visibility"] = tuple(d["visibility"])
    d["object_size"] = tuple(d["object_size"])
    return SceneRecipe(**d)


def class_frequencies(samples: list[Sample], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        lab = s.labels[s.labels != IGNORE_LABEL]
        counts += np.bincount(lab.ravel(), minlength=num_classes)[:num_classes]
    total = counts.sum()
    return counts / total if total else counts.astype(np.float64)


def stack_batch(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rgb = np.stack([s.rgb for s in samples])
    hha = np.stack([s.hha for s in samples])
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    return rgb, hha, labels

