"""HashSIFT: a learned affine projection of SIFT binarized by sign.

``bits = sign(B @ [sift(x), 1])`` with ``B`` of shape (K, 129).  Training
replaces the sign with ``tanh`` and minimises a triplet hinge loss whose inner
products are divided by K, with Adam.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bad import ModelFormatError, pack_bits
from .dataset import DatasetError, LabeledPatchSet, draw_pairs, draw_pool, label_groups, mine_triplets
from .imaging import AugmentParams, augment_batch
from .sift import DIM, root_sift, sift_describe_batch

log = logging.getLogger(__name__)

MODEL_MAGIC = "HASHSIFT v1"


@dataclass(frozen=True)
class HashSiftModel:
    B: np.ndarray
    use_rootsift: bool = False

    def __post_init__(self):
        B = np.asarray(self.B, dtype=np.float64)
        if B.ndim != 2 or B.shape[1] != DIM + 1 or B.shape[0] < 1:
            raise ValueError(f"hash matrix must be (K, {DIM + 1}), got {B.shape}")
        if not np.all(np.isfinite(B)):
            raise ValueError("hash matrix has non-finite entries")
        object.__setattr__(self, "B", B)

    @property
    def n_bits(self) -> int:
        return self.B.shape[0]


@dataclass
class HashTrainConfig:
    n_bits: int = 256
    batch_size: int = 512
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    margin: float = 0.4
    steps: int = 2000
    init_sigma: float = 0.25
    augment: AugmentParams | None = field(default_factory=AugmentParams.small)
    use_rootsift: bool = False
    swap: bool = True
    seed: int = 0
    pool_factor: int = 4

    def __post_init__(self):
        if min(self.n_bits, self.batch_size, self.steps, self.pool_factor) < 1:
            raise ValueError("n_bits, batch_size, steps and pool_factor must be >= 1")
        if not (self.learning_rate > 0 and self.margin > 0 and self.init_sigma > 0):
            raise ValueError("learning_rate, margin and init_sigma must be positive")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, B: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(B), np.zeros_like(B), 0)


def sift_features(patches, use_rootsift: bool = False) -> np.ndarray:
    f = sift_describe_batch(patches)
    return root_sift(f) if use_rootsift else f


def with_bias(f: np.ndarray) -> np.ndarray:
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    return np.concatenate([f, np.ones((len(f), 1))], axis=1)


def project(f, B: np.ndarray) -> np.ndarray:
    return with_bias(f) @ np.asarray(B).T


def relaxed_descriptor(f, B: np.ndarray) -> np.ndarray:
    out = np.tanh(project(f, B))
    return out[0] if np.ndim(f) == 1 else out


def binarize(f, model: HashSiftModel) -> np.ndarray:
    """Packed bits; bit k is set iff projection row k is >= 0."""
    out = pack_bits(project(f, model.B) >= 0)
    return out[0] if np.ndim(f) == 1 else out


def describe_batch(patches, model: HashSiftModel) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    if len(patches) == 0:
        return np.empty((0, -(-model.n_bits // 8)), dtype=np.uint8)
    return binarize(sift_features(patches, model.use_rootsift), model)


def describe(p, model: HashSiftModel) -> np.ndarray:
    return describe_batch(np.asarray(p)[None], model)[0]


# ---------------------------------------------------------------------------
# loss and gradient


def _hinge_terms(fa, fp, fn, B, tau):
    xa, xp, xn = with_bias(fa), with_bias(fp), with_bias(fn)
    if len(xa) == 0:
        raise ValueError("empty triplet batch")
    k = B.shape[0]
    da, dp, dn = np.tanh(xa @ B.T), np.tanh(xp @ B.T), np.tanh(xn @ B.T)
    z = tau - np.einsum("ij,ij->i", da, dp) / k + np.einsum("ij,ij->i", da, dn) / k
    return (xa, xp, xn), (da, dp, dn), z


def hash_loss(fa, fp, fn, B: np.ndarray, tau: float) -> float:
    """Sum over triplets of ``max(0, tau - Da.Dp / K + Da.Dn / K)``."""
    _, _, z = _hinge_terms(fa, fp, fn, np.asarray(B, dtype=np.float64), tau)
    return float(np.maximum(z, 0.0).sum())


def hash_loss_grad(fa, fp, fn, B: np.ndarray, tau: float) -> np.ndarray:
    """Subgradient of :func:`hash_loss` with respect to ``B`` (zero on
    inactive hinge terms)."""
    B = np.asarray(B, dtype=np.float64)
    (xa, xp, xn), (da, dp, dn), z = _hinge_terms(fa, fp, fn, B, tau)
    act = (z > 0).astype(np.float64)[:, None] / B.shape[0]
    ga = act * (dn - dp) * (1 - da * da)
    gp = -act * da * (1 - dp * dp)
    gn = act * da * (1 - dn * dn)
    return ga.T @ xa + gp.T @ xp + gn.T @ xn


def adam_step(B: np.ndarray, grad: np.ndarray, state: AdamState, cfg: HashTrainConfig):
    """One bias-corrected Adam update; returns new arrays, inputs untouched."""
    if B.shape != grad.shape or B.shape != state.m.shape:
        raise ValueError(f"shape mismatch: B {B.shape}, grad {grad.shape}, state {state.m.shape}")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad * grad
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    B_new = B - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return B_new, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# training


def random_hash_model(n_bits: int, rng: np.random.Generator, sigma: float = 0.25,
                      use_rootsift: bool = False) -> HashSiftModel:
    return HashSiftModel(rng.normal(0.0, sigma, size=(n_bits, DIM + 1)), use_rootsift)


def _euclidean(da: np.ndarray, db: np.ndarray) -> np.ndarray:
    sq = (da * da).sum(1)[:, None] + (db * db).sum(1)[None, :] - 2.0 * da @ db.T
    return np.sqrt(np.maximum(sq, 0.0))


def train_hashsift(ps: LabeledPatchSet, cfg: HashTrainConfig, callback=None) -> HashSiftModel:
    """Adam on the relaxed triplet loss with in-pool hard negatives.

    ``callback(step, B, loss)`` is invoked after every update when given.
    Deterministic given ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    groups = label_groups(ps.labels)
    if not groups or ps.n_labels < 2:
        raise DatasetError("training needs two labels and one label with two or more patches")
    augment = cfg.augment if cfg.augment is not None and not cfg.augment.is_identity else None
    # without augmentation SIFT never changes, so compute it once
    cached = None if augment else with_bias(sift_features(ps.patches, cfg.use_rootsift))

    B = rng.normal(0.0, cfg.init_sigma, size=(cfg.n_bits, DIM + 1))
    state = AdamState.zeros_like(B)
    n = cfg.batch_size
    local = np.full(len(ps), -1, dtype=np.int64)
    for step in range(1, cfg.steps + 1):
        anchors, positives = draw_pairs(ps.labels, n, rng, groups)
        pool = draw_pool(len(ps), cfg.pool_factor * n, rng)
        uniq = np.unique(np.concatenate([anchors, positives, pool]))
        local[uniq] = np.arange(len(uniq))
        if cached is None:
            x = with_bias(sift_features(augment_batch(ps.patches[uniq], augment, rng), cfg.use_rootsift))
        else:
            x = cached[uniq]
        d = np.tanh(x @ B.T)

        def dist(rows, cols):
            return _euclidean(d[local[rows]], d[local[cols]])

        batch = mine_triplets(anchors, positives, pool, ps.labels, dist, cfg.swap)
        xa, xp, xn = x[local[batch.anchor], :-1], x[local[batch.positive], :-1], x[local[batch.negative], :-1]
        grad = hash_loss_grad(xa, xp, xn, B, cfg.margin)
        B, state = adam_step(B, grad, state, cfg)
        local[uniq] = -1
        if callback is not None:
            callback(step, B, hash_loss(xa, xp, xn, B, cfg.margin))
    return HashSiftModel(B, cfg.use_rootsift)


# ---------------------------------------------------------------------------
# files


def save_model(model: HashSiftModel, path) -> None:
    lines = [MODEL_MAGIC, f"K {model.n_bits} rootsift {int(model.use_rootsift)}"]
    lines += [" ".join(f"{v:.16e}" for v in row) for row in model.B]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path) -> HashSiftModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MODEL_MAGIC:
        got = lines[0].strip() if lines else ""
        raise ModelFormatError(f"{path}: expected {MODEL_MAGIC!r} header, got {got!r}")
    try:
        kw, k, rw, r = lines[1].split()
        if kw != "K" or rw != "rootsift" or r not in ("0", "1"):
            raise ValueError
        k = int(k)
    except ValueError:
        raise ModelFormatError(f"{path}: malformed header line {lines[1]!r}") from None
    body = [ln for ln in lines[2:] if ln.strip()]
    if len(body) != k:
        raise ModelFormatError(f"{path}: header says K={k} but {len(body)} rows follow")
    try:
        B = np.array([[float(v) for v in ln.split()] for ln in body])
    except ValueError:
        raise ModelFormatError(f"{path}: non-numeric matrix entry") from None
    if B.shape != (k, DIM + 1):
        raise ModelFormatError(f"{path}: rows must have {DIM + 1} entries")
    return HashSiftModel(B, r == "1")
