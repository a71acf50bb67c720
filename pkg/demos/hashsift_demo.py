"""Learn a hashing matrix for SIFT and compare it with a random projection.

Each bit is sign(b . [sift, 1]).  Training replaces sign with tanh, mines
hard negatives inside a random pool, and runs Adam on the triplet hinge.
Augmentation is switched off so SIFT is computed once and cached.

Run:  python demos/hashsift_demo.py
"""

import time

import numpy as np

from bindesc import hashsift
from bindesc.dataset import make_verification_pairs
from bindesc.hashsift import HashTrainConfig, train_hashsift
from bindesc.matcheval import verification_eval
from bindesc.sift import sift_describe_batch
from bindesc.synthetic import brown_like_set

ps = brown_like_set(3000, seed=2)
train, test = ps.split_by_label(0.5, np.random.default_rng(0))
pairs = make_verification_pairs(test, 1000, 1000, np.random.default_rng(1))

losses = []
cfg = HashTrainConfig(n_bits=64, steps=400, batch_size=256, learning_rate=1e-3, augment=None, seed=0)
t0 = time.perf_counter()
model = train_hashsift(train, cfg, callback=lambda step, B, loss: losses.append(loss))
print(f"trained HashSIFT-64 in {time.perf_counter() - t0:.1f} s; "
      f"batch loss {np.mean(losses[:20]):.2f} -> {np.mean(losses[-20:]):.2f}")

random = hashsift.random_hash_model(64, np.random.default_rng(0))
for name, m in (("trained", model), ("random projection", random)):
    rep = verification_eval(lambda p: hashsift.describe_batch(p, m), test.patches, pairs)
    print(f"FPR-95 {name:18s}: {rep.fpr95:.3f}")
rep = verification_eval(sift_describe_batch, test.patches, pairs, metric="euclidean")
print(f"FPR-95 {'float SIFT (L2)':18s}: {rep.fpr95:.3f}")
