"""128-d SIFT descriptor of a normalized 32x32 patch.

No detection, pyramid or orientation assignment: the patch is assumed to be
already rotated and scaled.  Gradients use central differences, magnitudes
are Gaussian weighted (sigma = half the patch width) and spread trilinearly
over a 4x4 grid of cells and 8 orientation bins.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

N_CELLS = 4
N_ORI = 8
DIM = N_CELLS * N_CELLS * N_ORI
CLAMP = 0.2


def _gradients(p: np.ndarray):
    padded = np.pad(p, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = (padded[:, 1:-1, 2:] - padded[:, 1:-1, :-2]) * 0.5
    gy = (padded[:, 2:, 1:-1] - padded[:, :-2, 1:-1]) * 0.5
    return gx, gy


def clamp_normalize(v: np.ndarray, cap: float = CLAMP) -> np.ndarray:
    """Unit-normalize rows, clamp at ``cap`` and renormalize, to the fixed
    point of that iteration: ``min(alpha * v, cap)`` with unit norm.

    Rows with too few non-zero entries to reach unit norm under the cap get a
    single clamp/renormalize pass instead.  All-zero rows stay zero.
    """
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros_like(v)
    norms = np.linalg.norm(v, axis=1)
    live = norms > 0
    if not np.any(live):
        return out
    u = -np.sort(-v[live] / norms[live, None], axis=1)  # descending
    n, d = u.shape
    tail = np.cumsum((u**2)[:, ::-1], axis=1)[:, ::-1]  # sum_{i >= k} u_i^2
    k = np.arange(d)
    room = 1.0 - k * cap * cap
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.sqrt(np.where((room > 0) & (tail > 0), room / tail, np.nan))
    ok = alpha * u <= cap * (1 + 1e-12)
    ok &= np.isfinite(alpha)
    first = np.where(ok.any(axis=1), ok.argmax(axis=1), -1)

    src = v[live] / norms[live, None]
    res = np.empty_like(src)
    good = first >= 0
    a = alpha[np.arange(n), np.maximum(first, 0)]
    res[good] = np.minimum(a[good, None] * src[good], cap)
    if np.any(~good):
        once = np.minimum(src[~good], cap)
        res[~good] = once / np.linalg.norm(once, axis=1, keepdims=True)
    out[live] = res
    return out


@lru_cache(maxsize=4)
def _spatial_weights(h: int, w: int) -> np.ndarray:
    """(h*w, 16) Gaussian-weighted bilinear pixel-to-cell weights."""
    sigma = w / 2.0
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[:h, :w]
    gauss = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma * sigma))
    # continuous cell coordinates, cell centres at integers
    fx = (xx + 0.5) * N_CELLS / w - 0.5
    fy = (yy + 0.5) * N_CELLS / h - 0.5
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    out = np.zeros((h * w, N_CELLS * N_CELLS))
    pix = np.arange(h * w)
    for dy, wy in ((0, 1 - (fy - y0)), (1, fy - y0)):
        for dx, wx in ((0, 1 - (fx - x0)), (1, fx - x0)):
            yi, xi = y0 + dy, x0 + dx
            inside = ((yi >= 0) & (yi < N_CELLS) & (xi >= 0) & (xi < N_CELLS)).ravel()
            cell = (yi * N_CELLS + xi).ravel()
            out[pix[inside], cell[inside]] += (gauss * wy * wx).ravel()[inside]
    return out


def sift_describe_batch(patches) -> np.ndarray:
    """SIFT descriptors for a stack of square patches, shape (B, 128)."""
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim == 2:
        p = p[None]
    b, h, w = p.shape
    gx, gy = _gradients(p)
    mag = np.hypot(gx, gy).reshape(b, -1)
    fo = np.mod(np.arctan2(gy, gx), 2 * np.pi).reshape(b, -1) * (N_ORI / (2 * np.pi))
    o0 = np.floor(fo)
    wo1 = fo - o0
    o0 = o0.astype(np.int64) % N_ORI

    # per-pixel orientation histogram contributions, (B, h*w, 8)
    ori = np.zeros((b, h * w, N_ORI))
    bi, pi = np.indices(o0.shape)
    ori[bi, pi, o0] = mag * (1 - wo1)
    ori[bi, pi, (o0 + 1) % N_ORI] += mag * wo1

    sp = _spatial_weights(h, w)  # (h*w, 16)
    hist = np.einsum("pc,bpo->bco", sp, ori, optimize=True)
    return clamp_normalize(hist.reshape(b, DIM))


def sift_describe(p) -> np.ndarray:
    return sift_describe_batch(np.asarray(p)[None])[0]


def root_sift(d) -> np.ndarray:
    """L1-normalize then take the element-wise square root."""
    d = np.asarray(d, dtype=np.float64)
    s = d.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.sqrt(np.where(s > 0, d / s, 0.0))
    return out
