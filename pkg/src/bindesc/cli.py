"""Command-line entry point: ``bindesc <subcommand> ...``.

Subcommands: train-bad, train-hashsift, describe, match, eval, bench.
Module errors end the run with a one-line message and exit status 1;
usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import platform
import sys
import time

import numpy as np

from . import __version__, bad, hashsift
from .bad_train import BadTrainConfig, train_bad
from .dataset import DatasetError, load_dataset, make_verification_pairs
from .hashsift import HashTrainConfig, train_hashsift
from .imaging import PATCH_SIZE, AugmentParams
from .matcheval import (
    MatchResult, brute_force_match, matching_map, mutual_nn, verification_eval, write_report,
)
from .sift import sift_describe_batch

log = logging.getLogger("bindesc")


def _repro_header(args: argparse.Namespace) -> dict:
    """Config echo written at the top of every report."""
    head = {"bindesc": __version__, "command": args.command}
    for k, v in sorted(vars(args).items()):
        if k not in ("command", "func"):
            head[k] = v
    return head


# ---------------------------------------------------------------------------
# inputs


def _load_patches(path, fmt: str) -> np.ndarray:
    if fmt == "npy":
        p = np.load(path)
        if p.ndim != 3 or p.shape[1:] != (PATCH_SIZE, PATCH_SIZE):
            raise DatasetError(f"{path}: expected an (n, {PATCH_SIZE}, {PATCH_SIZE}) array, got {p.shape}")
        return p.astype(np.float64)
    return load_dataset(path, fmt).patches


def _model_kind(path) -> str:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if first == bad.MODEL_MAGIC:
        return "bad"
    if first == hashsift.MODEL_MAGIC:
        return "hashsift"
    raise bad.ModelFormatError(f"{path}: unknown model header {first!r}")


def _describer(path, threads: int | None):
    """(describe(patches) -> packed codes, n_bits) for a model file of either kind."""
    kind = _model_kind(path)
    if kind == "bad":
        m = bad.load_model(path)
        return (lambda p: bad.describe_batch(p, m, threads)), m.n_bits
    m = hashsift.load_model(path)
    return (lambda p: hashsift.describe_batch(p, m)), m.n_bits


def _threads(args) -> int | None:
    # DESC_THREADS wins over the flag
    if os.environ.get("DESC_THREADS"):
        return bad.default_threads()
    return args.threads


# ---------------------------------------------------------------------------
# commands


def cmd_train_bad(args) -> int:
    ps = load_dataset(args.data, args.format)
    cfg = BadTrainConfig(
        n_bits=args.bits, n_triplets=args.triplets, n_candidates=args.candidates,
        margin=args.margin, precision=args.precision, swap=not args.no_swap,
        augment=None if args.no_augment else AugmentParams.small(), seed=args.seed,
    )
    log.info("training BAD-%d on %d patches (%d labels)", cfg.n_bits, len(ps), ps.n_labels)
    model, trace = train_bad(ps, cfg, progress=lambda t, sel: log.info("bit %d loss %.4f", t, sel.loss))
    bad.save_model(model, args.out)
    if args.trace:
        trace.write_csv(args.trace, _repro_header(args))
    return 0


def cmd_train_hashsift(args) -> int:
    ps = load_dataset(args.data, args.format)
    cfg = HashTrainConfig(
        n_bits=args.bits, batch_size=args.batch, learning_rate=args.lr, margin=args.margin,
        steps=args.steps, augment=None if args.no_augment else AugmentParams.small(),
        use_rootsift=args.rootsift, seed=args.seed,
    )
    log.info("training HashSIFT-%d on %d patches", cfg.n_bits, len(ps))
    every = max(1, cfg.steps // 20)

    def cb(step, B, loss):
        if step % every == 0:
            log.info("step %d loss %.4f", step, loss)

    hashsift.save_model(train_hashsift(ps, cfg, callback=cb), args.out)
    return 0


def cmd_describe(args) -> int:
    describe, n_bits = _describer(args.model, _threads(args))
    patches = _load_patches(args.data, args.format)
    bad.write_descriptors(args.out, describe(patches), n_bits)
    return 0


def _write_matches(path, matches, header: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.writelines(f"# {k}={v}\n" for k, v in header.items())
        w = csv.writer(fh)
        w.writerow(["query_idx", "train_idx", "distance"])
        for m in matches:
            w.writerow([m.query_idx, m.train_idx, m.distance])


def _read_matches(path) -> list[MatchResult]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(row for row in fh if not row.startswith("#")))
    try:
        return [MatchResult(int(r["query_idx"]), int(r["train_idx"]), int(float(r["distance"]))) for r in rows]
    except (KeyError, ValueError, TypeError):
        raise ValueError(f"{path}: expected columns query_idx,train_idx,distance") from None


def _read_pairs(path) -> list[tuple[int, int]]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(ln for ln in fh if ln.strip() and not ln.startswith("#")):
            try:
                out.append((int(row[0]), int(row[1])))
            except (ValueError, IndexError):
                if out:  # only the first row may be a header
                    raise ValueError(f"{path}: bad ground-truth row {row}") from None
    return out


def cmd_match(args) -> int:
    q, kq = bad.read_descriptors(args.query)
    t, kt = bad.read_descriptors(args.train)
    if kq != kt:
        raise ValueError(f"bit count mismatch: {args.query} has {kq}, {args.train} has {kt}")
    matches = (mutual_nn if args.mutual else brute_force_match)(q, t)
    _write_matches(args.out, matches, _repro_header(args))
    return 0


def cmd_eval(args) -> int:
    header = _repro_header(args)
    if args.mode == "verification":
        if not args.data or not args.model:
            raise ValueError("verification mode needs --model and --data")
        ps = load_dataset(args.data, args.format)
        pairs = make_verification_pairs(ps, args.pairs, args.pairs, np.random.default_rng(args.seed))
        if args.model == "sift":
            describe, metric = sift_describe_batch, "euclidean"
        else:
            describe, metric = _describer(args.model, _threads(args))[0], "hamming"
        rows = verification_eval(describe, ps.patches, pairs, metric).as_rows()
    else:
        if not args.matches or not args.gt:
            raise ValueError("matching mode needs --matches and --gt")
        curve, ap = matching_map(_read_matches(args.matches), _read_pairs(args.gt))
        rows = [("ap", ap), ("final_recall", float(curve.recall[-1]) if curve.recall.size else 0.0)]
    write_report(rows, args.out, args.json, header)
    for k, v in rows:
        print(f"{k},{v}")
    return 0


def cmd_bench(args) -> int:
    if args.repeats < 5:
        raise ValueError("--repeats must be at least 5")
    threads = _threads(args) or os.cpu_count() or 1
    describe, n_bits = _describer(args.model, threads)
    if args.data:
        patches = _load_patches(args.data, args.format)[: args.patches]
    else:
        rng = np.random.default_rng(args.seed)
        patches = rng.integers(0, 256, size=(args.patches, PATCH_SIZE, PATCH_SIZE)).astype(np.float64)
    describe(patches[:8])  # warm caches outside the timed region
    times = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        describe(patches)
        times.append((time.perf_counter() - t0) * 1e3)
    times = np.asarray(times)
    rows = [
        ("mean_ms", float(times.mean())), ("std_ms", float(times.std(ddof=1))),
        ("n_patches", len(patches)), ("n_bits", n_bits), ("threads", threads),
        ("repeats", args.repeats),
    ]
    header = _repro_header(args) | {"machine": platform.machine(), "cpu_count": os.cpu_count()}
    write_report(rows, args.out, args.json, header)
    for k, v in rows:
        print(f"{k},{v}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _positive(kind):
    def conv(s):
        v = kind(s)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {s}")
        return v
    return conv


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bindesc", description="Learned binary patch descriptors.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, required=True, formats=("brown", "dir")):
        sp.add_argument("--data", required=required, help="dataset directory (or .npy stack)")
        sp.add_argument("--format", choices=formats, default=formats[0])

    sp = sub.add_parser("train-bad", help="greedy BAD feature selection")
    data_args(sp)
    sp.add_argument("--bits", type=_positive(int), default=256)
    sp.add_argument("--triplets", type=_positive(int), default=512)
    sp.add_argument("--candidates", type=_positive(int), default=1000)
    sp.add_argument("--margin", type=_positive(float), default=0.2)
    sp.add_argument("--precision", type=_positive(float), default=0.1)
    sp.add_argument("--no-swap", action="store_true")
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--trace")
    sp.set_defaults(func=cmd_train_bad)

    sp = sub.add_parser("train-hashsift", help="learn a SIFT hashing matrix")
    data_args(sp)
    sp.add_argument("--bits", type=_positive(int), default=256)
    sp.add_argument("--lr", type=_positive(float), default=2e-4)
    sp.add_argument("--margin", type=_positive(float), default=0.4)
    sp.add_argument("--steps", type=_positive(int), default=2000)
    sp.add_argument("--batch", type=_positive(int), default=512)
    sp.add_argument("--rootsift", action="store_true")
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_hashsift)

    sp = sub.add_parser("describe", help="write a descriptor dump")
    sp.add_argument("--model", required=True)
    data_args(sp, formats=("dir", "brown", "npy"))
    sp.add_argument("--threads", type=_positive(int))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_describe)

    sp = sub.add_parser("match", help="nearest-neighbour matching of two dumps")
    sp.add_argument("--query", required=True)
    sp.add_argument("--train", required=True)
    sp.add_argument("--mutual", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("eval", help="FPR-95 verification or matching AP")
    sp.add_argument("mode", choices=("verification", "matching"))
    sp.add_argument("--model", help="model file, or 'sift' for the float baseline")
    data_args(sp, required=False)
    sp.add_argument("--pairs", type=_positive(int), default=1000, help="positive and negative pairs each")
    sp.add_argument("--matches", help="matches CSV from the match command")
    sp.add_argument("--gt", help="CSV of correct query,train pairs")
    sp.add_argument("--threads", type=_positive(int))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="metric,value CSV")
    sp.add_argument("--json")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="time description")
    sp.add_argument("--model", required=True)
    data_args(sp, required=False, formats=("dir", "brown", "npy"))
    sp.add_argument("--patches", type=_positive(int), default=2000)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--threads", type=_positive(int))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.add_argument("--json")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, TypeError) as exc:
        print(f"bindesc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
