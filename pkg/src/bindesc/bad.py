"""Box Average Difference (BAD) descriptor.

Each bit thresholds the difference between the mean intensities of two
equally sized boxes inside a 32x32 patch.  Bits are packed LSB-first, and a
``+1`` response is stored as a set bit, so Hamming distance counts sign
disagreements and ``h(x).h(y) == K - 2 * hamming``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .imaging import PATCH_SIZE, box_bounds, integral_image, rect_sum

MODEL_MAGIC = "BADMODEL v1"
DESC_MAGIC = "DESC v1"
THETA_LIMIT = 256.0


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BoxPairFeature:
    x1: int
    y1: int
    x2: int
    y2: int
    s: int
    theta: float = 0.0

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not 0 <= v < PATCH_SIZE:
                raise ValueError(f"box centre outside the 32x32 patch: {self}")
        if not 1 <= self.s <= PATCH_SIZE:
            raise ValueError(f"box side must be in [1, 32]: {self}")
        if not (np.isfinite(self.theta) and abs(self.theta) <= THETA_LIMIT):
            raise ValueError(f"threshold out of range: {self}")

    def with_theta(self, theta: float) -> "BoxPairFeature":
        return BoxPairFeature(self.x1, self.y1, self.x2, self.y2, self.s, float(theta))


class BoxGeometry:
    """Clamped corner indices of K box pairs on a 33x33 integral image,
    vectorised for batch evaluation."""

    def __init__(self, x1, y1, x2, y2, s, size: int = PATCH_SIZE):
        x1, y1, x2, y2, s = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=np.int64)) for v in (x1, y1, x2, y2, s)))
        self.size = size
        self.params = np.stack([x1, y1, x2, y2, s], axis=-1).reshape(-1, 5)
        w = size + 1
        r1, c1, r2, c2 = box_bounds(x1, y1, s, size, size)
        self.a1 = ((r2 - r1) * (c2 - c1)).astype(np.float64)
        self.idx1 = np.stack([r2 * w + c2, r1 * w + c2, r2 * w + c1, r1 * w + c1])
        r1, c1, r2, c2 = box_bounds(x2, y2, s, size, size)
        self.a2 = ((r2 - r1) * (c2 - c1)).astype(np.float64)
        self.idx2 = np.stack([r2 * w + c2, r1 * w + c2, r2 * w + c1, r1 * w + c1])

    def __len__(self) -> int:
        return self.idx1.shape[1]

    @classmethod
    def from_features(cls, features) -> "BoxGeometry":
        arr = np.array([(f.x1, f.y1, f.x2, f.y2, f.s) for f in features], dtype=np.int64).reshape(-1, 5)
        return cls(*arr.T)

    def values(self, ii_flat: np.ndarray) -> np.ndarray:
        """Feature values for integral images flattened to (B, 33*33) -> (B, K)."""
        i = self.idx1
        s1 = ii_flat[:, i[0]] - ii_flat[:, i[1]] - ii_flat[:, i[2]] + ii_flat[:, i[3]]
        i = self.idx2
        s2 = ii_flat[:, i[0]] - ii_flat[:, i[1]] - ii_flat[:, i[2]] + ii_flat[:, i[3]]
        return s1 / self.a1 - s2 / self.a2


@dataclass(frozen=True)
class BadModel:
    features: tuple[BoxPairFeature, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if not self.features:
            raise ValueError("a BAD model needs at least one feature")

    @property
    def n_bits(self) -> int:
        return len(self.features)

    @cached_property
    def geometry(self) -> BoxGeometry:
        return BoxGeometry.from_features(self.features)

    @cached_property
    def thresholds(self) -> np.ndarray:
        return np.array([f.theta for f in self.features], dtype=np.float64)


# (33, 32) strictly-lower ones: row r sums input rows < r
_PREFIX = np.tril(np.ones((PATCH_SIZE + 1, PATCH_SIZE)), -1)


def patch_integrals(patches: np.ndarray) -> np.ndarray:
    """Flattened float integral images of a patch stack, shape (B, 33*33).

    Two prefix-sum matrix products; exact for integer-valued patches.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim == 2:
        patches = patches[None]
    return (_PREFIX @ patches @ _PREFIX.T).reshape(len(patches), -1)


def feature_value(p: np.ndarray, f: BoxPairFeature) -> float:
    ii = integral_image(np.asarray(p, dtype=np.float64))
    r1, c1, r2, c2 = box_bounds(f.x1, f.y1, f.s, PATCH_SIZE, PATCH_SIZE)
    m1 = rect_sum(ii, r1, c1, r2, c2) / ((r2 - r1) * (c2 - c1))
    r1, c1, r2, c2 = box_bounds(f.x2, f.y2, f.s, PATCH_SIZE, PATCH_SIZE)
    m2 = rect_sum(ii, r1, c1, r2, c2) / ((r2 - r1) * (c2 - c1))
    return float(m1 - m2)


def weak_response(p: np.ndarray, f: BoxPairFeature) -> int:
    return 1 if feature_value(p, f) <= f.theta else -1


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a (n, K) boolean array LSB-first into (n, ceil(K/8)) bytes."""
    return np.packbits(np.asarray(bits, dtype=bool), axis=-1, bitorder="little")


def unpack_bits(desc: np.ndarray, n_bits: int) -> np.ndarray:
    return np.unpackbits(np.asarray(desc, dtype=np.uint8), axis=-1, count=n_bits, bitorder="little").astype(bool)


def responses(patches: np.ndarray, model: BadModel) -> np.ndarray:
    """Signed weak responses, (B, K) int8 in {+1, -1}."""
    vals = model.geometry.values(patch_integrals(patches))
    return np.where(vals <= model.thresholds, 1, -1).astype(np.int8)


def describe(p: np.ndarray, model: BadModel) -> np.ndarray:
    return describe_batch(np.asarray(p)[None], model, threads=1)[0]


def _describe_chunk(patches: np.ndarray, model: BadModel) -> np.ndarray:
    vals = model.geometry.values(patch_integrals(patches))
    return pack_bits(vals <= model.thresholds)


def default_threads() -> int:
    env = os.environ.get("DESC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def describe_batch(patches, model: BadModel, threads: int | None = None) -> np.ndarray:
    """Describe a stack of patches; returns (n, ceil(K/8)) uint8 in input order."""
    patches = np.asarray(patches, dtype=np.float64)
    n_bytes = -(-model.n_bits // 8)
    if len(patches) == 0:
        return np.empty((0, n_bytes), dtype=np.uint8)
    threads = default_threads() if threads is None else threads
    if threads <= 1 or len(patches) < 64:
        return _describe_chunk(patches, model)
    chunks = np.array_split(patches, threads)
    with ThreadPoolExecutor(threads) as pool:
        return np.concatenate(list(pool.map(lambda c: _describe_chunk(c, model), chunks)))


def random_bad_model(n_bits: int, rng: np.random.Generator, box_size: int | None = 5, theta: float = 0.0) -> BadModel:
    """Untrained baseline: random box pairs with a fixed threshold.  With
    ``box_size=5`` and ``theta=0`` this mimics smoothed pixel-pair tests."""
    feats = []
    while len(feats) < n_bits:
        x1, y1, x2, y2 = (int(v) for v in rng.integers(PATCH_SIZE, size=4))
        if (x1, y1) == (x2, y2):
            continue
        s = box_size if box_size is not None else int(rng.integers(1, PATCH_SIZE + 1))
        feats.append(BoxPairFeature(x1, y1, x2, y2, s, theta))
    return BadModel(tuple(feats))


# ---------------------------------------------------------------------------
# files


def format_theta(theta: float) -> str:
    text = f"{theta:.4f}"
    return text if float(text) == theta else repr(float(theta))


def save_model(model: BadModel, path) -> None:
    lines = [MODEL_MAGIC, f"K {model.n_bits}"]
    lines += [f"{f.x1} {f.y1} {f.x2} {f.y2} {f.s} {format_theta(f.theta)}" for f in model.features]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path) -> BadModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MODEL_MAGIC:
        got = lines[0].strip() if lines else ""
        raise ModelFormatError(f"{path}: expected {MODEL_MAGIC!r} header, got {got!r}")
    try:
        key, k = lines[1].split()
        k = int(k)
        if key != "K":
            raise ValueError
    except (IndexError, ValueError):
        raise ModelFormatError(f"{path}: malformed K line") from None
    body = [ln for ln in lines[2:] if ln.strip()]
    if len(body) != k:
        raise ModelFormatError(f"{path}: header says K={k} but {len(body)} feature lines follow")
    feats = []
    for lineno, ln in enumerate(body, 3):
        parts = ln.split()
        try:
            x1, y1, x2, y2, s = (int(v) for v in parts[:5])
            theta = float(parts[5])
            if len(parts) != 6:
                raise ValueError
            feats.append(BoxPairFeature(x1, y1, x2, y2, s, theta))
        except (ValueError, IndexError) as exc:
            raise ModelFormatError(f"{path}:{lineno}: bad feature line {ln!r} ({exc})") from None
    return BadModel(tuple(feats))


def write_descriptors(path, descs: np.ndarray, n_bits: int) -> None:
    descs = np.asarray(descs, dtype=np.uint8).reshape(len(descs), -1)
    lines = [f"{DESC_MAGIC} bits={n_bits} count={len(descs)}"]
    lines += [row.tobytes().hex() for row in descs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_descriptors(path) -> tuple[np.ndarray, int]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split() if lines else []
    try:
        if " ".join(head[:2]) != DESC_MAGIC:
            raise ValueError
        fields = dict(tok.split("=", 1) for tok in head[2:])
        n_bits, count = int(fields["bits"]), int(fields["count"])
    except (ValueError, KeyError):
        raise ModelFormatError(f"{path}: not a {DESC_MAGIC!r} descriptor dump") from None
    rows = [ln.strip() for ln in lines[1:] if ln.strip()]
    if len(rows) != count:
        raise ModelFormatError(f"{path}: header says count={count} but {len(rows)} rows follow")
    n_bytes = -(-n_bits // 8)
    out = np.zeros((count, n_bytes), dtype=np.uint8)
    for i, row in enumerate(rows):
        try:
            raw = bytes.fromhex(row)
        except ValueError:
            raise ModelFormatError(f"{path}: row {i} is not hex") from None
        if len(raw) != n_bytes:
            raise ModelFormatError(f"{path}: row {i} has {len(raw)} bytes, expected {n_bytes}")
        out[i] = np.frombuffer(raw, dtype=np.uint8)
    if n_bits % 8 and np.any(out[:, -1] >> (n_bits % 8)):
        raise ModelFormatError(f"{path}: non-zero padding bits")
    return out, n_bits
