"""Synthetic patch corpora for tests and demos.

``brown_like`` imitates a multi-view patch dataset: every 3D point is a random
multi-scale texture, and each of its patches is a view under a small random
similarity warp, gain/offset change, blur and sensor noise.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .dataset import LabeledPatchSet, _downscale2
from .imaging import PATCH_SIZE

VIEW_SIZE = 64


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    tex = np.zeros((size, size))
    for sigma in (1.5, 3.0, 6.0):
        layer = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
        tex += rng.uniform(0.3, 1.0) * layer / (layer.std() + 1e-12)
    yy, xx = np.mgrid[:size, :size] / size
    tex += rng.normal(scale=1.0) * (xx - 0.5) + rng.normal(scale=1.0) * (yy - 0.5)
    tex = (tex - tex.mean()) / (tex.std() + 1e-12)
    return 128.0 + rng.uniform(25.0, 50.0) * tex


def _view(tex: np.ndarray, rng: np.random.Generator, out: int) -> np.ndarray:
    c = (tex.shape[0] - 1) / 2.0
    ang = rng.uniform(-0.25, 0.25)
    scale = rng.uniform(0.85, 1.15)
    shift = rng.uniform(-2.0, 2.0, size=2)
    half = (out - 1) / 2.0
    jj, ii = np.meshgrid(np.arange(out) - half, np.arange(out) - half)
    cos, sin = np.cos(ang) / scale, np.sin(ang) / scale
    xs = c + shift[0] + cos * jj - sin * ii
    ys = c + shift[1] + sin * jj + cos * ii
    v = ndimage.map_coordinates(tex, [ys, xs], order=1, mode="reflect")
    v = rng.uniform(0.75, 1.25) * (v - 128.0) + 128.0 + rng.uniform(-20.0, 20.0)
    sigma = rng.uniform(0.0, 1.5)
    if sigma > 0.2:
        v = ndimage.gaussian_filter(v, sigma, mode="nearest")
    v += rng.normal(scale=4.0, size=v.shape)
    return np.clip(np.rint(v), 0, 255)


def brown_like(n_patches: int, seed: int = 0, views: tuple[int, int] = (2, 5)):
    """64x64 patches and integer labels, grouped by label in order."""
    rng = np.random.default_rng(seed)
    patches, labels = [], []
    label = 0
    tex_size = int(VIEW_SIZE * 1.6)
    while len(patches) < n_patches:
        tex = _texture(rng, tex_size)
        k = min(int(rng.integers(views[0], views[1] + 1)), n_patches - len(patches))
        if k < 2 and patches:
            k = 2
            patches.pop()
            labels.pop()
        for _ in range(k):
            patches.append(_view(tex, rng, VIEW_SIZE))
            labels.append(label)
        label += 1
    return np.stack(patches).astype(np.uint8), np.asarray(labels, dtype=np.int64)


def brown_like_set(n_patches: int, seed: int = 0) -> LabeledPatchSet:
    p64, labels = brown_like(n_patches, seed)
    return LabeledPatchSet(_downscale2(p64.astype(np.float64)), labels)


def one_pixel_toy(n_per_label: int, seed: int = 0, noise: float = 1.0,
                  pixel: tuple[int, int] = (16, 16), textured: bool = False) -> LabeledPatchSet:
    """Two labels that differ only at ``pixel`` (x, y), which is set to 255 in
    label 1 and left as background in label 0.  The shared background is flat
    grey, or one fixed smooth texture when ``textured``.  Every patch gets
    independent Gaussian noise."""
    rng = np.random.default_rng(seed)
    if textured:
        base = ndimage.gaussian_filter(rng.uniform(60, 180, size=(PATCH_SIZE, PATCH_SIZE)), 1.0)
    else:
        base = np.full((PATCH_SIZE, PATCH_SIZE), 128.0)
    x, y = pixel
    out, labels = [], []
    for lab in (0, 1):
        for _ in range(n_per_label):
            p = base + rng.normal(scale=noise, size=base.shape)
            if lab:
                p[y, x] = 255.0
            out.append(np.clip(p, 0, 255))
            labels.append(lab)
    return LabeledPatchSet(np.stack(out), np.asarray(labels))
