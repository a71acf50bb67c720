"""Grayscale patch primitives: integral images, box averages, patch
normalization around keypoints and training-time augmentation.

Coordinates are ``(x, y) = (column, row)`` with the origin at the top-left
pixel centre.  A box of side ``s`` centred on pixel ``(x, y)`` covers columns
``x - s//2 .. x + ceil(s/2) - 1`` (rows likewise), clamped to the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PATCH_SIZE = 32


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    diameter: float
    orientation: float = 0.0

    def __post_init__(self):
        if not self.diameter > 0:
            raise ValueError(f"keypoint diameter must be positive, got {self.diameter}")


@dataclass(frozen=True)
class AugmentParams:
    """Ranges for random patch augmentation.  All zeros means identity."""

    max_rotation: float = 0.0  # radians, symmetric
    scale_range: tuple[float, float] = (1.0, 1.0)
    illumination_delta: float = 0.0  # additive, symmetric
    blur_sigma_range: tuple[float, float] = (0.0, 0.0)
    noise_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        blo, bhi = self.blur_sigma_range
        if self.max_rotation < 0 or self.illumination_delta < 0 or self.noise_sigma < 0:
            raise ValueError("augmentation ranges must be non-negative")
        if not (0 < lo <= 1.0 <= hi):
            raise ValueError(f"scale_range must contain 1, got {self.scale_range}")
        if not (0 <= blo <= bhi):
            raise ValueError(f"invalid blur_sigma_range {self.blur_sigma_range}")

    @property
    def is_identity(self) -> bool:
        return (
            self.max_rotation == 0
            and self.scale_range == (1.0, 1.0)
            and self.illumination_delta == 0
            and self.blur_sigma_range[1] == 0
            and self.noise_sigma == 0
        )

    @classmethod
    def small(cls, rng_seed: int = 0) -> "AugmentParams":
        """Mild defaults used for descriptor training."""
        return cls(
            max_rotation=np.deg2rad(5.0),
            scale_range=(0.95, 1.05),
            illumination_delta=10.0,
            blur_sigma_range=(0.0, 0.8),
            noise_sigma=2.0,
            rng_seed=rng_seed,
        )


@dataclass(frozen=True)
class AugmentDraw:
    """One concrete realisation of the random augmentation parameters."""

    rotation: float = 0.0
    scale: float = 1.0
    illumination: float = 0.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0


def as_gray(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D grayscale image, got shape {img.shape}")
    return img


def integral_image(img) -> np.ndarray:
    """Summed-area table with a leading row and column of zeros.

    ``ii[r, c]`` is the sum of all pixels with row < r and column < c.
    Integer images give int64 tables, anything else float64.
    """
    img = np.asarray(img)
    dtype = np.int64 if np.issubdtype(img.dtype, np.integer) else np.float64
    *lead, h, w = img.shape
    ii = np.zeros((*lead, h + 1, w + 1), dtype=dtype)
    np.cumsum(np.cumsum(img, axis=-2, dtype=dtype), axis=-1, out=ii[..., 1:, 1:])
    return ii


def rect_sum(ii: np.ndarray, r1, c1, r2, c2):
    """Sum over rows [r1, r2) and columns [c1, c2)."""
    return ii[..., r2, c2] - ii[..., r1, c2] - ii[..., r2, c1] + ii[..., r1, c1]


def box_bounds(x, y, s, width: int, height: int):
    """Half-open clamped bounds ``(r1, c1, r2, c2)`` of the s x s box at (x, y).

    Works elementwise on integer arrays.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    s = np.asarray(s)
    lo = s // 2
    hi = s - lo  # == ceil(s/2)
    c1 = np.clip(x - lo, 0, width)
    c2 = np.clip(x + hi, 0, width)
    r1 = np.clip(y - lo, 0, height)
    r2 = np.clip(y + hi, 0, height)
    return r1, c1, r2, c2


def box_average(ii: np.ndarray, center, s: int) -> float:
    x, y = center
    height, width = ii.shape[-2] - 1, ii.shape[-1] - 1
    if s < 1:
        raise ValueError(f"box side must be >= 1, got {s}")
    if not (0 <= x < width and 0 <= y < height):
        raise ValueError(f"box centre {center} outside {width}x{height} image")
    r1, c1, r2, c2 = box_bounds(int(x), int(y), int(s), width, height)
    area = (r2 - r1) * (c2 - c1)
    return float(rect_sum(ii, r1, c1, r2, c2)) / float(area)


def _sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(
        img.astype(np.float64, copy=False), [ys, xs], order=1, mode="nearest"
    )


def _patch_grid(size: int = PATCH_SIZE):
    half = (size - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(size) - half, np.arange(size) - half)
    return jj, ii


def normalize_patch(img, kp: Keypoint, crop_factor: float = 6.75, size: int = PATCH_SIZE) -> np.ndarray:
    """Cut an oriented square of side ``crop_factor * kp.diameter`` around the
    keypoint and resample it to ``size x size`` with bilinear interpolation.

    The patch is rotated by ``-kp.orientation`` so the keypoint direction maps
    onto the +x axis.  Samples falling outside the image replicate the border.
    """
    img = as_gray(img)
    if not crop_factor > 0:
        raise ValueError(f"crop_factor must be positive, got {crop_factor}")
    h, w = img.shape
    side = crop_factor * kp.diameter
    half_extent = side / np.sqrt(2.0)
    if (
        kp.x + half_extent < -0.5
        or kp.x - half_extent > w - 0.5
        or kp.y + half_extent < -0.5
        or kp.y - half_extent > h - 0.5
    ):
        raise ValueError(f"crop region of {kp} does not overlap the {w}x{h} image")

    step = side / size
    jj, ii = _patch_grid(size)
    cos, sin = np.cos(kp.orientation), np.sin(kp.orientation)
    xs = kp.x + step * (cos * jj - sin * ii)
    ys = kp.y + step * (sin * jj + cos * ii)
    return np.clip(_sample_bilinear(img, xs, ys), 0.0, 255.0)


def draw_augment(params: AugmentParams, rng: np.random.Generator) -> AugmentDraw:
    """Draw one set of augmentation parameters.  Always consumes four draws."""
    rot = rng.uniform(-params.max_rotation, params.max_rotation)
    scale = rng.uniform(*params.scale_range)
    illum = rng.uniform(-params.illumination_delta, params.illumination_delta)
    blur = rng.uniform(*params.blur_sigma_range)
    return AugmentDraw(rot, scale, illum, blur, params.noise_sigma)


def apply_augment(p: np.ndarray, draw: AugmentDraw, rng: np.random.Generator | None = None) -> np.ndarray:
    """Geometric -> illumination -> blur -> noise, then clamp to [0, 255]."""
    out = np.asarray(p, dtype=np.float64)
    if draw.rotation != 0.0 or draw.scale != 1.0:
        size = out.shape[0]
        half = (size - 1) / 2.0
        jj, ii = _patch_grid(size)
        cos, sin = np.cos(draw.rotation), np.sin(draw.rotation)
        inv = 1.0 / draw.scale
        xs = half + inv * (cos * jj - sin * ii)
        ys = half + inv * (sin * jj + cos * ii)
        out = _sample_bilinear(out, xs, ys)
    if draw.illumination != 0.0:
        out = out + draw.illumination
    if draw.blur_sigma > 0.0:
        out = ndimage.gaussian_filter(out, draw.blur_sigma, mode="nearest")
    if draw.noise_sigma > 0.0:
        if rng is None:
            raise ValueError("pixel noise requested without a random generator")
        out = out + rng.normal(0.0, draw.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 255.0)


def augment_patch(p: np.ndarray, params: AugmentParams, rng: np.random.Generator | None = None) -> np.ndarray:
    if rng is None:
        rng = np.random.default_rng(params.rng_seed)
    if params.is_identity:
        return np.asarray(p, dtype=np.float64).copy()
    return apply_augment(p, draw_augment(params, rng), rng)


def augment_batch(patches: np.ndarray, params: AugmentParams | None, rng: np.random.Generator) -> np.ndarray:
    """Augment a stack of patches independently, in order."""
    patches = np.asarray(patches, dtype=np.float64)
    if params is None or params.is_identity:
        return patches
    return np.stack([augment_patch(p, params, rng) for p in patches])
