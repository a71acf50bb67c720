"""Labelled patch corpora, verification pairs and triplet mining.

Two on-disk layouts are understood:

* Brown mosaics: ``<root>/patches*.bmp`` are 1024x1024 grayscale bitmaps
  holding a 16x16 row-major grid of 64x64 patches; ``<root>/info.txt`` has
  one line per patch whose first integer is the 3D point id.  Patches are
  downscaled to 32x32 by 2x2 averaging on load.
* Patch directories: ``<root>/<label>/<name>.(png|pgm)`` with 32x32 grayscale
  images, read in lexicographic (label, filename) order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .imaging import PATCH_SIZE

BROWN_PATCH = 64
BROWN_GRID = 16
BROWN_MOSAIC = BROWN_PATCH * BROWN_GRID
PATCHES_PER_MOSAIC = BROWN_GRID * BROWN_GRID
IMAGE_SUFFIXES = (".png", ".pgm")

# dist(rows, cols) -> len(rows) x len(cols) matrix of distances between patch indices
DistanceFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledPatchSet:
    patches: np.ndarray  # (M, 32, 32) float64
    labels: np.ndarray  # (M,) int64

    def __post_init__(self):
        patches = np.asarray(self.patches, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if patches.ndim != 3 or patches.shape[1:] != (PATCH_SIZE, PATCH_SIZE):
            raise DatasetError(f"patches must have shape (M, 32, 32), got {patches.shape}")
        if len(patches) != len(labels):
            raise DatasetError(f"{len(patches)} patches but {len(labels)} labels")
        object.__setattr__(self, "patches", patches)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_labels(self) -> int:
        return len(np.unique(self.labels))

    def subset(self, idx) -> "LabeledPatchSet":
        idx = np.asarray(idx)
        return LabeledPatchSet(self.patches[idx], self.labels[idx])

    def split_by_label(self, fraction: float, rng: np.random.Generator):
        """Partition into two sets with disjoint labels; ``fraction`` of the
        labels go to the first part."""
        uniq = np.unique(self.labels)
        chosen = rng.permutation(uniq)[: int(round(fraction * len(uniq)))]
        mask = np.isin(self.labels, chosen)
        return self.subset(np.flatnonzero(mask)), self.subset(np.flatnonzero(~mask))


@dataclass(frozen=True)
class TripletBatch:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor)

    def validate(self, labels: np.ndarray) -> None:
        la, lp, ln = labels[self.anchor], labels[self.positive], labels[self.negative]
        if np.any(la != lp) or np.any(la == ln) or np.any(self.anchor == self.positive):
            raise DatasetError("invalid triplet in batch")


@dataclass(frozen=True)
class VerificationPairSet:
    a: np.ndarray
    b: np.ndarray
    is_match: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.a)


# ---------------------------------------------------------------------------
# Brown mosaics


def _downscale2(p: np.ndarray) -> np.ndarray:
    h, w = p.shape[-2:]
    return p.reshape(*p.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


def _read_info(path: Path) -> np.ndarray:
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                labels.append(int(line.split()[0]))
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: malformed info line {line.rstrip()!r}") from None
    return np.asarray(labels, dtype=np.int64)


def load_brown(root) -> LabeledPatchSet:
    root = Path(root)
    info = root / "info.txt"
    if not info.is_file():
        raise DatasetError(f"missing info file {info}")
    labels = _read_info(info)
    mosaics = sorted(root.glob("patches*.bmp"))
    expected = -(-len(labels) // PATCHES_PER_MOSAIC)
    if len(mosaics) != expected:
        raise DatasetError(
            f"{len(labels)} info lines need {expected} mosaics, found {len(mosaics)} in {root}"
        )
    out = np.empty((len(labels), PATCH_SIZE, PATCH_SIZE), dtype=np.float64)
    for m, path in enumerate(mosaics):
        img = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
        if img.shape != (BROWN_MOSAIC, BROWN_MOSAIC):
            raise DatasetError(f"{path}: mosaic must be {BROWN_MOSAIC}x{BROWN_MOSAIC}, got {img.shape}")
        tiles = img.reshape(BROWN_GRID, BROWN_PATCH, BROWN_GRID, BROWN_PATCH).swapaxes(1, 2)
        tiles = tiles.reshape(PATCHES_PER_MOSAIC, BROWN_PATCH, BROWN_PATCH)
        start = m * PATCHES_PER_MOSAIC
        n = min(PATCHES_PER_MOSAIC, len(labels) - start)
        out[start : start + n] = _downscale2(tiles[:n])
    return LabeledPatchSet(out, labels)


def save_brown(patches64: np.ndarray, labels, root) -> None:
    """Write 64x64 patches and labels in the Brown mosaic layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    patches64 = np.clip(np.rint(np.asarray(patches64, dtype=np.float64)), 0, 255).astype(np.uint8)
    if patches64.shape[1:] != (BROWN_PATCH, BROWN_PATCH):
        raise DatasetError(f"Brown patches must be 64x64, got {patches64.shape[1:]}")
    n = len(patches64)
    for m in range(-(-n // PATCHES_PER_MOSAIC)):
        chunk = np.zeros((PATCHES_PER_MOSAIC, BROWN_PATCH, BROWN_PATCH), dtype=np.uint8)
        part = patches64[m * PATCHES_PER_MOSAIC : (m + 1) * PATCHES_PER_MOSAIC]
        chunk[: len(part)] = part
        mosaic = chunk.reshape(BROWN_GRID, BROWN_GRID, BROWN_PATCH, BROWN_PATCH).swapaxes(1, 2)
        Image.fromarray(mosaic.reshape(BROWN_MOSAIC, BROWN_MOSAIC)).save(root / f"patches{m:04d}.bmp")
    with open(root / "info.txt", "w") as fh:
        for lab in labels:
            fh.write(f"{int(lab)} 0\n")


# ---------------------------------------------------------------------------
# Plain patch directories


def load_patch_dir(root) -> LabeledPatchSet:
    root = Path(root)
    label_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    names = [d.name for d in label_dirs]
    numeric = all(n.lstrip("-").isdigit() for n in names)
    patches, labels = [], []
    for ordinal, d in enumerate(label_dirs):
        lab = int(d.name) if numeric else ordinal
        for f in sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            img = np.asarray(Image.open(f).convert("L"), dtype=np.float64)
            if img.shape != (PATCH_SIZE, PATCH_SIZE):
                raise DatasetError(f"{f}: expected a 32x32 patch, got {img.shape[1]}x{img.shape[0]}")
            patches.append(img)
            labels.append(lab)
    if not patches:
        raise DatasetError(f"no patches found under {root}")
    return LabeledPatchSet(np.stack(patches), np.asarray(labels))


def save_patch_dir(ps: LabeledPatchSet, root) -> None:
    """Write one PNG per patch under zero-padded label directories, so that
    reloading preserves the order of a label-sorted set."""
    root = Path(root)
    for i, (p, lab) in enumerate(zip(ps.patches, ps.labels)):
        d = root / f"{int(lab):08d}"
        d.mkdir(parents=True, exist_ok=True)
        img = np.clip(np.rint(p), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(d / f"{i:08d}.png")


def load_dataset(root, fmt: str) -> LabeledPatchSet:
    if fmt == "brown":
        return load_brown(root)
    if fmt == "dir":
        return load_patch_dir(root)
    raise DatasetError(f"unknown dataset format {fmt!r}")


# ---------------------------------------------------------------------------
# Sampling


def label_groups(labels: np.ndarray) -> list[np.ndarray]:
    """Index arrays of every label with at least two patches, in label order."""
    order = np.argsort(labels, kind="stable")
    uniq, starts, counts = np.unique(labels[order], return_index=True, return_counts=True)
    return [order[s : s + c] for s, c in zip(starts, counts) if c >= 2]


def draw_pairs(labels: np.ndarray, n: int, rng: np.random.Generator, groups=None):
    """``n`` anchor/positive index pairs, labels drawn uniformly."""
    groups = label_groups(labels) if groups is None else groups
    if not groups:
        raise DatasetError("no label has two or more patches")
    which = rng.integers(len(groups), size=n)
    anchors = np.empty(n, dtype=np.int64)
    positives = np.empty(n, dtype=np.int64)
    for k, g in enumerate(which):
        anchors[k], positives[k] = rng.choice(groups[g], size=2, replace=False)
    return anchors, positives


def draw_pool(n_patches: int, size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n_patches, size=min(size, n_patches), replace=False)


def mine_triplets(anchors, positives, pool, labels, dist: DistanceFn, swap: bool = True) -> TripletBatch:
    """Hardest negative per anchor among ``pool``, then optional anchor swap."""
    anchors = np.asarray(anchors)
    positives = np.asarray(positives)
    pool = np.asarray(pool)
    d = np.array(dist(anchors, pool), dtype=np.float64)
    d[labels[anchors][:, None] == labels[pool][None, :]] = np.inf
    pick = np.argmin(d, axis=1)
    negatives = pool[pick]
    d_an = d[np.arange(len(anchors)), pick]

    empty = ~np.isfinite(d_an)
    if np.any(empty):
        # pool held nothing usable for these anchors: fall back to the full set
        everyone = np.arange(len(labels))
        for k in np.flatnonzero(empty):
            cand = everyone[labels != labels[anchors[k]]]
            if len(cand) == 0:
                raise DatasetError("at least two labels are needed to mine negatives")
            dk = np.asarray(dist(anchors[k : k + 1], cand), dtype=np.float64)[0]
            j = int(np.argmin(dk))
            negatives[k], d_an[k] = cand[j], dk[j]

    if swap:
        d_pn = np.diagonal(np.asarray(dist(positives, negatives), dtype=np.float64))
        flip = d_pn < d_an
        anchors, positives = np.where(flip, positives, anchors), np.where(flip, anchors, positives)
    return TripletBatch(anchors, positives, negatives)


def sample_triplets(
    ps: LabeledPatchSet,
    n: int,
    dist: DistanceFn,
    swap: bool = True,
    rng: np.random.Generator | None = None,
    pool_size: int | None = None,
) -> TripletBatch:
    """Draw ``n`` anchor/positive pairs and mine the hardest negative for each
    from a random pool of ``pool_size`` (default ``4 n``) patches."""
    rng = np.random.default_rng() if rng is None else rng
    if ps.n_labels < 2:
        raise DatasetError("triplet mining needs at least two labels")
    anchors, positives = draw_pairs(ps.labels, n, rng)
    pool = draw_pool(len(ps), 4 * n if pool_size is None else pool_size, rng)
    return mine_triplets(anchors, positives, pool, ps.labels, dist, swap)


def make_verification_pairs(ps: LabeledPatchSet, n_pos: int, n_neg: int, rng: np.random.Generator) -> VerificationPairSet:
    labels = ps.labels
    a, b = [], []
    if n_pos:
        pa, pb = draw_pairs(labels, n_pos, rng)
        a.append(pa)
        b.append(pb)
    if n_neg:
        if len(np.unique(labels)) < 2:
            raise DatasetError("negative pairs need at least two labels")
        na = np.empty(n_neg, dtype=np.int64)
        nb = np.empty(n_neg, dtype=np.int64)
        for k in range(n_neg):
            while True:
                i, j = rng.integers(len(labels), size=2)
                if labels[i] != labels[j]:
                    break
            na[k], nb[k] = i, j
        a.append(na)
        b.append(nb)
    a = np.concatenate(a) if a else np.empty(0, dtype=np.int64)
    b = np.concatenate(b) if b else np.empty(0, dtype=np.int64)
    return VerificationPairSet(a, b, labels[a] == labels[b])
