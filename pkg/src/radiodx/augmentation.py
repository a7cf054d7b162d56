"""Seeded random affine augmentation (rotation, shear, shift, zoom)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentationPolicy:
    rotation_max: float = 15.0   # degrees
    shear_max: float = 10.0      # degrees
    shift_max: float = 0.1       # fraction of width / height
    zoom_range: tuple[float, float] = (0.9, 1.1)
    fill_value: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "zoom_range", tuple(float(z) for z in self.zoom_range))
        mags = (self.rotation_max, self.shear_max, self.shift_max, *self.zoom_range, self.fill_value)
        if not all(math.isfinite(m) for m in mags):
            raise ValueError("augmentation magnitudes must be finite")
        if self.rotation_max < 0 or self.shear_max < 0 or self.shift_max < 0:
            raise ValueError("augmentation magnitudes must be >= 0")
        lo, hi = self.zoom_range
        if not 0 < lo <= 1 <= hi:
            raise ValueError(f"zoom_range must satisfy 0 < lo <= 1 <= hi, got {self.zoom_range}")
        if not 0 <= self.fill_value <= 1:
            raise ValueError("fill_value must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(0.0, 0.0, 0.0, (1.0, 1.0), 0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["zoom_range"] = list(self.zoom_range)
        return d


@dataclass(frozen=True)
class AffineParams:
    angle: float = 0.0   # degrees, counter-clockwise on screen
    shear: float = 0.0   # degrees
    dx: float = 0.0      # pixels
    dy: float = 0.0
    zoom: float = 1.0


def draw_params(policy: AugmentationPolicy, width: int, height: int, seed: int) -> AffineParams:
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-policy.rotation_max, policy.rotation_max)
    shear = rng.uniform(-policy.shear_max, policy.shear_max)
    dx = rng.uniform(-policy.shift_max, policy.shift_max) * width
    dy = rng.uniform(-policy.shift_max, policy.shift_max) * height
    zoom = rng.uniform(*policy.zoom_range)
    return AffineParams(float(angle), float(shear), float(dx), float(dy), float(zoom))


def forward_matrix(params: AffineParams) -> np.ndarray:
    """Linear part of the destination map ``zoom @ rotation @ shear`` in (x, y) pixel coords.

    y grows downwards, so a positive angle turns content counter-clockwise on screen.
    """
    t = math.radians(params.angle)
    c, s = math.cos(t), math.sin(t)
    rot = np.array([[c, s], [-s, c]])
    shear = np.array([[1.0, math.tan(math.radians(params.shear))], [0.0, 1.0]])
    return params.zoom * rot @ shear


def warp(img: np.ndarray, params: AffineParams, fill: float = 0.0) -> np.ndarray:
    """Resample ``[C, H, W]`` through one centre-anchored affine map.

    A source point ``p`` lands at ``c + A (p + t - c)`` with ``t = (dx, dy)`` and
    ``c`` the image centre; each output pixel is sampled bilinearly at the
    preimage of its coordinates, reading ``fill`` outside the image.
    """
    img = np.asarray(img)
    ch, h, w = img.shape
    inv = np.linalg.inv(forward_matrix(params))
    cx, cy = (w - 1) / 2, (h - 1) / 2
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ux, uy = xs - cx, ys - cy
    sx = inv[0, 0] * ux + inv[0, 1] * uy + cx - params.dx
    sy = inv[1, 0] * ux + inv[1, 1] * uy + cy - params.dy
    return _sample(img, sx, sy, fill)


def _sample(img: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill: float) -> np.ndarray:
    ch, h, w = img.shape
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    src = img.astype(np.float64)
    out = np.zeros((ch, h, w), dtype=np.float64)
    for oy, ox, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                        (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        yy, xx = y0 + oy, x0 + ox
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.where(inside, src[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], fill)
        out += wgt * vals
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float32)


def augment(img: np.ndarray, policy: AugmentationPolicy, seed: int) -> tuple[np.ndarray, AffineParams]:
    """Draw affine parameters from ``seed`` and warp ``img`` with them."""
    _, h, w = np.shape(img)
    params = draw_params(policy, w, h, seed)
    return warp(img, params, policy.fill_value), params


def sample_seed(run_seed: int, epoch: int, index: int) -> int:
    """64-bit per-sample seed derived from (run_seed, epoch, sample index)."""
    state = np.random.SeedSequence([run_seed, epoch, index]).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)
