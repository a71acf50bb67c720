"""Greedy BAD feature selection under a triplet ranking loss.

At iteration ``t`` every candidate box pair is scored by the hinge loss of
the descriptor extended with that candidate's bit, using similarities
normalised by the bit count::

    S_t(x, y) = ((t - 1) * S_{t-1}(x, y) + h_t(x) h_t(y)) / t
    L = sum_i max(0, tau - S_t(a_i, p_i) + S_t(a_i, n_i))

The best threshold of a candidate is found by sweeping the sorted feature
values and accumulating the loss change at each crossing, either with an
exact sort or with a counting sort over a fixed threshold grid.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .bad import BadModel, BoxGeometry, BoxPairFeature, patch_integrals
from .dataset import DatasetError, LabeledPatchSet, TripletBatch, draw_pairs, draw_pool, label_groups, mine_triplets
from .imaging import PATCH_SIZE, AugmentParams, augment_batch

log = logging.getLogger(__name__)

FEATURE_RANGE = 255.0


@dataclass
class BadTrainConfig:
    n_bits: int = 256
    n_triplets: int = 512
    n_candidates: int = 1000
    margin: float = 0.2
    precision: float = 0.1
    swap: bool = True
    augment: AugmentParams | None = field(default_factory=AugmentParams.small)
    seed: int = 0
    pool_factor: int = 4

    def __post_init__(self):
        if min(self.n_bits, self.n_triplets, self.n_candidates, self.pool_factor) < 1:
            raise ValueError("n_bits, n_triplets, n_candidates and pool_factor must be >= 1")
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if not self.precision > 0:
            raise ValueError(f"precision must be positive, got {self.precision}")


@dataclass(frozen=True)
class ThresholdSearchResult:
    theta: float
    loss: float


@dataclass(frozen=True)
class SelectionRecord:
    iteration: int
    feature: BoxPairFeature
    loss: float
    best_candidate_loss: float
    worst_candidate_loss: float
    triplet_mean_response: float = 0.0


@dataclass
class SelectionTrace:
    records: list[SelectionRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def write_csv(self, path, header_comments: dict | None = None) -> None:
        with open(path, "w", newline="") as fh:
            for key, val in (header_comments or {}).items():
                fh.write(f"# {key}={val}\n")
            w = csv.writer(fh)
            w.writerow(["iter", "x1", "y1", "x2", "y2", "s", "theta", "loss",
                        "best_candidate_loss", "worst_candidate_loss"])
            for r in self.records:
                f = r.feature
                w.writerow([r.iteration, f.x1, f.y1, f.x2, f.y2, f.s, repr(f.theta), repr(r.loss),
                            repr(r.best_candidate_loss), repr(r.worst_candidate_loss)])


# ---------------------------------------------------------------------------
# losses


def triplet_loss(s_ap, s_an, tau: float) -> float:
    s_ap = np.asarray(s_ap, dtype=np.float64)
    s_an = np.asarray(s_an, dtype=np.float64)
    if s_ap.shape != s_an.shape:
        raise ValueError(f"similarity length mismatch: {s_ap.shape} vs {s_an.shape}")
    return float(np.maximum(0.0, tau - s_ap + s_an).sum())


def per_step_loss(prev_ap, prev_an, bits_a, bits_p, bits_n, tau: float, t: int) -> float:
    """Loss after appending one bit to a descriptor of ``t - 1`` bits whose
    normalised similarities are ``prev_ap`` / ``prev_an``."""
    arrays = [np.asarray(v, dtype=np.float64) for v in (prev_ap, prev_an, bits_a, bits_p, bits_n)]
    if len({a.shape for a in arrays}) != 1:
        raise ValueError("per_step_loss inputs must have equal lengths")
    prev_ap, prev_an, a, p, n = arrays
    s_ap = ((t - 1) * prev_ap + a * p) / t
    s_an = ((t - 1) * prev_an + a * n) / t
    return triplet_loss(s_ap, s_an, tau)


def crossing_deltas(fa, fp, fn, prev_ap, prev_an, tau: float, t: int):
    """Loss changes as the threshold crosses each triplet member's value.

    ``fa``, ``fp``, ``fn`` hold feature values with shape ``(..., N)``; the
    prior similarities broadcast against them.  Returns ``(values, deltas,
    loss_at_minus_inf)`` with values/deltas of shape ``(..., 3N)``.

    Below every value all bits are -1; crossing a member's value flips its
    bit to +1.  Each triplet contributes its three level changes in sorted
    order, which keeps the sweep exact when members share a value.
    """
    vals = np.stack(np.broadcast_arrays(
        np.asarray(fa, dtype=np.float64), np.asarray(fp, dtype=np.float64), np.asarray(fn, dtype=np.float64)
    ), axis=-1)
    base = (t - 1) * (np.asarray(prev_ap, dtype=np.float64) - np.asarray(prev_an, dtype=np.float64))
    base = np.broadcast_to(base, vals.shape[:-1])

    rank = np.argsort(np.argsort(vals, axis=-1, kind="stable"), axis=-1, kind="stable")
    # levels[..., k]: hinge of the triplet once its k lowest members flipped to +1
    levels = np.empty(vals.shape[:-1] + (4,))
    for k in range(4):
        h = np.where(rank < k, 1.0, -1.0)
        ha, hp, hn = h[..., 0], h[..., 1], h[..., 2]
        levels[..., k] = np.maximum(0.0, tau - (base + ha * hp - ha * hn) / t)
    steps = np.diff(levels, axis=-1)  # (..., N, 3) change at sorted position k
    deltas = np.take_along_axis(steps, rank, axis=-1)
    shape = vals.shape[:-2] + (-1,)
    return vals.reshape(shape), deltas.reshape(shape), levels[..., 0].sum(axis=-1)


# ---------------------------------------------------------------------------
# threshold search


def find_threshold(values, deltas, loss_neg_inf: float, eps: float = 0.05) -> ThresholdSearchResult:
    """Exact sorted sweep.  Returns the first (smallest) threshold reaching the
    minimal accumulated loss, placed ``eps`` above its crossing value (or
    halfway to the next distinct value when that is closer)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    deltas = np.asarray(deltas, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("find_threshold needs at least one value")
    if values.shape != deltas.shape:
        raise ValueError("values and deltas must have equal length")
    order = np.argsort(values, kind="stable")
    v = values[order]
    cum = loss_neg_inf + np.cumsum(deltas[order])
    # the threshold can only sit after the last of a group of equal values
    group_end = np.append(v[1:] != v[:-1], True)
    k = int(np.argmin(np.where(group_end, cum, np.inf)))
    offset = eps if k == len(v) - 1 else min(eps, (v[k + 1] - v[k]) / 2.0)
    return ThresholdSearchResult(float(v[k] + offset), float(cum[k]))


def threshold_grid(precision: float, limit: float = FEATURE_RANGE) -> np.ndarray:
    """Candidate thresholds ``(q + 1/2) * precision`` covering [-limit, limit]."""
    lo = int(np.floor(-limit / precision)) - 1
    hi = int(np.ceil(limit / precision)) + 1
    return np.round((np.arange(lo, hi) + 0.5) * precision, 10)


def _bucket_index(values: np.ndarray, grid: np.ndarray, precision: float) -> np.ndarray:
    """Smallest grid index q with ``values <= grid[q]``, in O(1) per value."""
    q0 = int(round(grid[0] / precision - 0.5))
    idx = np.ceil(values / precision - 0.5).astype(np.int64) - q0
    idx = np.clip(idx, 0, len(grid) - 1)
    idx += values > grid[idx]
    lower = np.maximum(idx - 1, 0)
    idx -= (idx > 0) & (values <= grid[lower])
    return idx


def find_threshold_bucketed(values, deltas, loss_neg_inf, precision: float = 0.1):
    """Counting-sort sweep over ``threshold_grid(precision)``.

    Accepts a single candidate (1-D ``values``) or a batch ``(J, P)`` with one
    ``loss_neg_inf`` per row; returns a ThresholdSearchResult or arrays
    ``(theta, loss)`` respectively.
    """
    if not precision > 0:
        raise ValueError(f"precision must be positive, got {precision}")
    values = np.asarray(values, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    single = values.ndim == 1
    values = np.atleast_2d(values)
    deltas = np.atleast_2d(deltas)
    base = np.atleast_1d(np.asarray(loss_neg_inf, dtype=np.float64))
    if values.shape[1] == 0:
        raise ValueError("find_threshold_bucketed needs at least one value")
    if np.abs(values).max() > FEATURE_RANGE:
        raise ValueError("feature values must lie in [-255, 255]")

    grid = threshold_grid(precision)
    m = len(grid)
    rows = len(values)
    idx = _bucket_index(values, grid, precision)
    flat = (idx + m * np.arange(rows)[:, None]).ravel()
    sums = np.bincount(flat, weights=deltas.ravel(), minlength=rows * m).reshape(rows, m)
    cum = base[:, None] + np.cumsum(sums, axis=1)
    # thresholds below the first crossing are not candidates
    cum[np.arange(m)[None, :] < idx.min(axis=1)[:, None]] = np.inf
    best = np.argmin(cum, axis=1)
    theta = grid[best]
    loss = cum[np.arange(rows), best]
    if single:
        return ThresholdSearchResult(float(theta[0]), float(loss[0]))
    return theta, loss


# ---------------------------------------------------------------------------
# selection


def sample_candidates(n: int, rng: np.random.Generator, size: int = PATCH_SIZE) -> BoxGeometry:
    """``n`` random box pairs with distinct centres and sides in [1, size]."""
    xy = rng.integers(size, size=(n, 4))
    same = (xy[:, 0] == xy[:, 2]) & (xy[:, 1] == xy[:, 3])
    while np.any(same):
        xy[same] = rng.integers(size, size=(int(same.sum()), 4))
        same = (xy[:, 0] == xy[:, 2]) & (xy[:, 1] == xy[:, 3])
    s = rng.integers(1, size + 1, size=n)
    return BoxGeometry(xy[:, 0], xy[:, 1], xy[:, 2], xy[:, 3], s)


@dataclass(frozen=True)
class SelectionResult:
    index: int
    feature: BoxPairFeature
    loss: float
    candidate_losses: np.ndarray
    mean_response: float = 0.0  # of the chosen bit over all triplet members


def candidate_values(patches: np.ndarray, triplets: TripletBatch, candidates: BoxGeometry):
    """Feature values of every candidate on anchors, positives and negatives,
    each shaped (J, N)."""
    members = np.concatenate([triplets.anchor, triplets.positive, triplets.negative])
    uniq, inv = np.unique(members, return_inverse=True)
    vals = candidates.values(patch_integrals(patches[uniq])).T  # (J, U)
    n = len(triplets)
    return vals[:, inv[:n]], vals[:, inv[n : 2 * n]], vals[:, inv[2 * n :]]


def select_next_feature(
    triplets: TripletBatch,
    patches: np.ndarray,
    prev_ap,
    prev_an,
    candidates: BoxGeometry,
    tau: float,
    t: int,
    precision: float = 0.1,
) -> SelectionResult:
    """Pick the candidate whose optimally thresholded bit minimises the
    per-step loss; ties go to the earliest candidate."""
    fa, fp, fn = candidate_values(patches, triplets, candidates)
    vals, deltas, base = crossing_deltas(fa, fp, fn, prev_ap, prev_an, tau, t)
    theta, loss = find_threshold_bucketed(vals, deltas, base, precision)
    loss = np.maximum(loss, 0.0)  # the running sums can drift a few ulp below zero
    j = int(np.argmin(loss))
    x1, y1, x2, y2, s = candidates.params[j]
    feat = BoxPairFeature(int(x1), int(y1), int(x2), int(y2), int(s), float(theta[j]))
    ha, hp, hn = (np.where(f[j] <= feat.theta, 1.0, -1.0) for f in (fa, fp, fn))
    # report the winner's loss evaluated directly rather than accumulated
    loss[j] = per_step_loss(prev_ap, prev_an, ha, hp, hn, tau, t)
    mean = float(np.concatenate([ha, hp, hn]).mean())
    return SelectionResult(j, feat, float(loss[j]), loss, mean)


# ---------------------------------------------------------------------------
# training loop


def _hamming_callback(resp: np.ndarray, local: np.ndarray, rng: np.random.Generator):
    """Hamming distance between dataset indices through their rows in
    ``resp``, plus a jitter in [0, 0.5) so that ties among equally hard
    negatives are broken uniformly at random instead of by pool position."""
    n_bits = resp.shape[1]

    def dist(rows, cols):
        a = resp[local[rows]]
        b = resp[local[cols]]
        return (n_bits - a @ b.T) / 2.0 + 0.5 * rng.random((len(rows), len(cols)))

    return dist


def train_bad(ps: LabeledPatchSet, cfg: BadTrainConfig, progress=None) -> tuple[BadModel, SelectionTrace]:
    """Select ``cfg.n_bits`` box-pair features greedily.  Deterministic given
    ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    groups = label_groups(ps.labels)
    if not groups or ps.n_labels < 2:
        raise DatasetError("training needs two labels and one label with two or more patches")
    n = cfg.n_triplets
    features: list[BoxPairFeature] = []
    trace = SelectionTrace()
    local = np.full(len(ps), -1, dtype=np.int64)

    for t in range(1, cfg.n_bits + 1):
        anchors, positives = draw_pairs(ps.labels, n, rng, groups)
        pool = draw_pool(len(ps), cfg.pool_factor * n, rng)
        uniq = np.unique(np.concatenate([anchors, positives, pool]))
        local[uniq] = np.arange(len(uniq))
        work = augment_batch(ps.patches[uniq], cfg.augment, rng)

        if t == 1:
            # no bits yet: random surrogate distances
            def dist(rows, cols):
                return rng.random((len(rows), len(cols)))
            resp = np.zeros((len(uniq), 0))
        else:
            geom = BoxGeometry.from_features(features)
            thr = np.array([f.theta for f in features])
            resp = np.where(geom.values(patch_integrals(work)) <= thr, 1.0, -1.0)
            dist = _hamming_callback(resp, local, rng)

        batch = mine_triplets(anchors, positives, pool, ps.labels, dist, cfg.swap)
        lt = TripletBatch(local[batch.anchor], local[batch.positive], local[batch.negative])
        if t == 1:
            prev_ap = prev_an = np.zeros(n)
        else:
            prev_ap = np.einsum("ij,ij->i", resp[lt.anchor], resp[lt.positive]) / (t - 1)
            prev_an = np.einsum("ij,ij->i", resp[lt.anchor], resp[lt.negative]) / (t - 1)

        cands = sample_candidates(cfg.n_candidates, rng)
        sel = select_next_feature(lt, work, prev_ap, prev_an, cands, cfg.margin, t, cfg.precision)
        features.append(sel.feature)
        trace.records.append(SelectionRecord(
            t, sel.feature, sel.loss, float(sel.candidate_losses.min()),
            float(sel.candidate_losses.max()), sel.mean_response,
        ))
        local[uniq] = -1
        log.debug("iter %d: %s loss=%.4f", t, sel.feature, sel.loss)
        if progress is not None:
            progress(t, sel)
    return BadModel(tuple(features)), trace
