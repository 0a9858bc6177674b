"""Depth to HHA: disparity, height above ground, angle with gravity.

Simplified encoder for synthetic frames where the gravity direction is known.
Back-projection uses ``P(u, v) = depth * ((u - cx)/fx, (v - cy)/fy, 1)``.
Normals come from ``numpy.gradient`` of ``P`` over the pixel grid (central
differences inside, one-sided at the borders), oriented towards the camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AllInvalid, NonPositiveDepth

# fixed-scale mode: disparity in 1/m, height in m
FIXED_MAX_DISPARITY = 2.0
FIXED_MAX_HEIGHT = 3.0


@dataclass
class DepthFrame:
    depth: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ValueError(f"depth must be H x W, got {self.depth.shape}")
        if self.valid_mask is None:
            self.valid_mask = self.depth > 0
        else:
            self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        g = np.asarray(self.gravity, dtype=np.float64)
        norm = np.linalg.norm(g)
        if norm == 0:
            raise ValueError("gravity must be non-zero")
        self.gravity = g / norm

    @classmethod
    def pinhole(cls, depth, fov_scale: float = 1.0, **kwargs) -> "DepthFrame":
        """Frame with ``fx = fy = fov_scale * W`` and a centred principal point."""
        depth = np.asarray(depth, dtype=np.float64)
        h, w = depth.shape
        f = fov_scale * w
        return cls(depth, f, f, (w - 1) / 2.0, (h - 1) / 2.0, **kwargs)


def _validate(frame: DepthFrame) -> None:
    valid = frame.valid_mask
    if not valid.any():
        raise AllInvalid("no valid depth pixels")
    if np.any(frame.depth[valid] <= 0) or not np.all(np.isfinite(frame.depth[valid])):
        raise NonPositiveDepth("valid pixels must have finite positive depth")


def backproject(frame: DepthFrame) -> np.ndarray:
    """Camera-space points, shape H x W x 3."""
    h, w = frame.depth.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    d = frame.depth
    return np.stack([d * (u - frame.cx) / frame.fx, d * (v - frame.cy) / frame.fy, d], axis=-1)


def surface_normals(points: np.ndarray) -> np.ndarray:
    """Unit normals from the cross product of the two grid tangents, facing the camera."""
    d_v, d_u = np.gradient(points, axis=(0, 1))
    n = np.cross(d_u, d_v)
    length = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.divide(n, length, out=np.zeros_like(n), where=length > 0)
    facing = np.sum(n * points, axis=-1, keepdims=True) > 0
    return np.where(facing, -n, n)


@dataclass
class HHARaw:
    disparity: np.ndarray
    height: np.ndarray
    normals: np.ndarray
    cos_angle: np.ndarray


def hha_components(frame: DepthFrame) -> HHARaw:
    """Un-normalised HHA quantities (invalid pixels are zero)."""
    _validate(frame)
    valid = frame.valid_mask
    safe = np.where(valid, frame.depth, 1.0)
    disparity = np.where(valid, 1.0 / safe, 0.0)
    pts = backproject(DepthFrame(safe, frame.fx, frame.fy, frame.cx, frame.cy, frame.gravity, valid))
    height = -(pts @ frame.gravity)
    height = np.where(valid, height - height[valid].min(), 0.0)
    normals = surface_normals(pts)
    cos_angle = np.where(valid, normals @ frame.gravity, 0.0)
    return HHARaw(disparity, height, normals, cos_angle)


def _minmax(x: np.ndarray, valid: np.ndarray) -> np.ndarray:
    lo, hi = x[valid].min(), x[valid].max()
    if hi <= lo:
        return np.zeros_like(x)
    return np.where(valid, (x - lo) / (hi - lo), 0.0)


def encode_hha(frame: DepthFrame, fixed_scale: bool = False) -> np.ndarray:
    """3 x H x W HHA map in [0, 1]; invalid pixels are 0 in every channel."""
    raw = hha_components(frame)
    valid = frame.valid_mask
    if fixed_scale:
        disp = np.clip(raw.disparity / FIXED_MAX_DISPARITY, 0.0, 1.0)
        height = np.clip(raw.height / FIXED_MAX_HEIGHT, 0.0, 1.0)
    else:
        disp = _minmax(raw.disparity, valid)
        height = _minmax(raw.height, valid)
    angle = np.where(valid, np.clip((1.0 + raw.cos_angle) / 2.0, 0.0, 1.0), 0.0)
    out = np.stack([disp, height, angle]).astype(np.float32)
    out[:, ~valid] = 0.0
    return out
