"""Hamming matching and evaluation metrics.

Descriptors are packed ``uint8`` rows (LSB-first, pad bits zero).  Distances
come from a byte-wise popcount table, so pad bits never contribute.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


@dataclass(frozen=True)
class MatchResult:
    query_idx: int
    train_idx: int
    distance: int


@dataclass(frozen=True)
class PRCurve:
    thresholds: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    ap: float


def _as_codes(d) -> np.ndarray:
    d = np.asarray(d)
    if d.dtype != np.uint8:
        raise TypeError(f"binary descriptors must be uint8, got {d.dtype}")
    return d


def hamming(a, b) -> int | np.ndarray:
    """Hamming distance between packed descriptors; broadcasts over leading axes."""
    a, b = _as_codes(a), _as_codes(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"descriptor length mismatch: {a.shape[-1]} vs {b.shape[-1]} bytes")
    d = _POPCOUNT[np.bitwise_xor(a, b)].sum(axis=-1)
    return int(d) if np.ndim(d) == 0 else d


def hamming_matrix(queries, trains, chunk: int = 256) -> np.ndarray:
    """All-pairs Hamming distances, shape (len(queries), len(trains))."""
    q, t = np.atleast_2d(_as_codes(queries)), np.atleast_2d(_as_codes(trains))
    if q.shape[1] != t.shape[1]:
        raise ValueError(f"descriptor length mismatch: {q.shape[1]} vs {t.shape[1]} bytes")
    out = np.empty((len(q), len(t)), dtype=np.int64)
    for i in range(0, len(q), chunk):
        x = np.bitwise_xor(q[i:i + chunk, None, :], t[None, :, :])
        out[i:i + chunk] = _POPCOUNT[x].sum(axis=-1)
    return out


def _nn(dist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # argmin returns the first minimum, which is the lowest-index tie rule
    j = dist.argmin(axis=1)
    return j, dist[np.arange(len(dist)), j]


def _check_trains(trains):
    if len(np.atleast_2d(trains)) == 0 or np.size(trains) == 0:
        raise ValueError("train descriptor set is empty")


def brute_force_match(queries, trains) -> list[MatchResult]:
    _check_trains(trains)
    d = hamming_matrix(queries, trains)
    j, dj = _nn(d)
    return [MatchResult(i, int(a), int(b)) for i, (a, b) in enumerate(zip(j, dj))]


def mutual_nn(queries, trains) -> list[MatchResult]:
    """Pairs that are each other's nearest neighbour."""
    _check_trains(trains)
    if np.size(queries) == 0:
        return []
    d = hamming_matrix(queries, trains)
    j, dj = _nn(d)
    back = d.argmin(axis=0)
    return [MatchResult(i, int(j[i]), int(dj[i])) for i in range(len(d)) if back[j[i]] == i]


# ---------------------------------------------------------------------------
# metrics


def fpr95(pos_dists, neg_dists) -> float:
    """False-positive rate at the smallest threshold that accepts 95% of
    positives (accept means ``distance <= t``)."""
    pos = np.sort(np.asarray(pos_dists, dtype=np.float64).ravel())
    neg = np.asarray(neg_dists, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("fpr95 needs at least one positive and one negative distance")
    need = (95 * len(pos) + 99) // 100  # ceil(0.95 n) in exact integer arithmetic
    t = pos[need - 1]
    return float(np.count_nonzero(neg <= t)) / len(neg)


def matching_map(matches: Sequence[MatchResult], ground_truth: Iterable[tuple[int, int]]) -> tuple[PRCurve, float]:
    """PR curve over a sweep of the distance threshold and its average precision.

    Matches with equal distance enter together.  AP is the sum of
    ``precision * delta_recall`` over threshold steps, with recall measured
    against the full ground truth, so missed correspondences lower it.
    """
    gt = {(int(a), int(b)) for a, b in ground_truth}
    if not gt:
        raise ValueError("ground truth is empty")
    if not matches:
        empty = np.empty(0)
        return PRCurve(empty, empty, empty, 0.0), 0.0
    dist = np.array([m.distance for m in matches], dtype=np.float64)
    ok = np.array([(m.query_idx, m.train_idx) in gt for m in matches], dtype=np.int64)
    order = np.argsort(dist, kind="stable")
    dist, ok = dist[order], ok[order]
    last = np.r_[np.flatnonzero(np.diff(dist)), len(dist) - 1]  # end of each tie group
    accepted = last + 1
    correct = np.cumsum(ok)[last]
    precision = correct / accepted
    recall = correct / len(gt)
    # accumulate in threshold order so the value is reproducible by a plain scan
    ap = float(np.cumsum(precision * np.diff(np.r_[0.0, recall]))[-1])
    return PRCurve(dist[last], recall, precision, ap), ap


# ---------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class VerificationReport:
    fpr95: float
    n_pos: int
    n_neg: int
    metric: str

    def as_rows(self) -> list[tuple[str, float]]:
        return [("fpr95", self.fpr95), ("n_pos", self.n_pos), ("n_neg", self.n_neg)]


def pair_distances(da: np.ndarray, db: np.ndarray, metric: str = "hamming") -> np.ndarray:
    if metric == "hamming":
        return np.asarray(hamming(da, db), dtype=np.float64)
    if metric == "euclidean":
        return np.linalg.norm(np.asarray(da, np.float64) - np.asarray(db, np.float64), axis=-1)
    raise ValueError(f"unknown metric {metric!r}")


def verification_eval(describe: Callable[[np.ndarray], np.ndarray], patches, pairs,
                      metric: str = "hamming") -> VerificationReport:
    """Score FPR-95 on index pairs into ``patches``.

    ``describe`` maps a (n, 32, 32) stack to descriptors: packed ``uint8``
    for ``hamming``, float rows for ``euclidean``.  Only patches referenced
    by a pair are described, each once.
    """
    patches = np.asarray(patches)
    used, inv = np.unique(np.concatenate([pairs.a, pairs.b]), return_inverse=True)
    desc = describe(patches[used])
    ia, ib = inv[:len(pairs.a)], inv[len(pairs.a):]
    d = pair_distances(desc[ia], desc[ib], metric)
    m = np.asarray(pairs.is_match, dtype=bool)
    return VerificationReport(fpr95(d[m], d[~m]), int(m.sum()), int((~m).sum()), metric)


# ---------------------------------------------------------------------------
# reports


def write_report(rows: Iterable[tuple[str, object]], csv_path=None, json_path=None,
                 header: dict | None = None) -> None:
    """``metric,value`` CSV preceded by ``# key=value`` header lines, and/or
    a JSON object ``{"config": header, "metrics": {...}}``."""
    rows = list(rows)
    header = header or {}
    if csv_path is not None:
        lines = [f"# {k}={v}" for k, v in header.items()] + ["metric,value"]
        lines += [f"{k},{v}" for k, v in rows]
        Path(csv_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if json_path is not None:
        doc = {"config": header, "metrics": {k: v for k, v in rows}}
        Path(json_path).write_text(json.dumps(doc, indent=2, default=str) + "\n", encoding="utf-8")


def read_report(csv_path) -> dict[str, float]:
    out = {}
    for ln in Path(csv_path).read_text(encoding="utf-8").splitlines():
        if not ln or ln.startswith("#") or ln == "metric,value":
            continue
        k, v = ln.split(",", 1)
        out[k] = float(v)
    return out


def matches_to_rows(matches: Sequence[MatchResult]) -> list[dict]:
    return [asdict(m) for m in matches]
