import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bindesc import hashsift
from bindesc.bad import ModelFormatError, unpack_bits
from bindesc.hashsift import (
    AdamState, HashSiftModel, HashTrainConfig, adam_step, binarize, hash_loss, hash_loss_grad,
    relaxed_descriptor, train_hashsift,
)
from bindesc.sift import sift_describe_batch
from bindesc.synthetic import one_pixel_toy


def sift_like(rng, n):
    f = rng.random((n, 128)) ** 2
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def loss_termwise(fa, fp, fn, B, tau):
    k = B.shape[0]
    total = 0.0
    for a, p, n in zip(fa, fp, fn):
        da, dp, dn = (np.tanh(B @ np.append(x, 1.0)) for x in (a, p, n))
        total += max(0.0, tau - da @ dp / k + da @ dn / k)
    return total


def hinge_args(fa, fp, fn, B, tau):
    k = B.shape[0]
    d = lambda f: np.tanh(np.c_[f, np.ones(len(f))] @ B.T)
    return tau - np.einsum("ij,ij->i", d(fa), d(fp)) / k + np.einsum("ij,ij->i", d(fa), d(fn)) / k


# -- descriptor ----------------------------------------------------------------

def test_relaxed_zero_matrix():
    f = sift_like(np.random.default_rng(0), 1)[0]
    np.testing.assert_array_equal(relaxed_descriptor(f, np.zeros((16, 129))), np.zeros(16))


def test_relaxed_bias_only():
    rng = np.random.default_rng(1)
    B = np.zeros((10, 129))
    B[:, -1] = rng.normal(size=10)
    for f in sift_like(rng, 3):
        np.testing.assert_allclose(relaxed_descriptor(f, B), np.tanh(B[:, -1]), atol=0)


def test_relaxed_direct():
    rng = np.random.default_rng(2)
    B, f = rng.normal(size=(32, 129)), sift_like(rng, 5)
    expect = np.array([[math.tanh(sum(B[k, i] * x[i] for i in range(128)) + B[k, 128]) for k in range(32)] for x in f])
    np.testing.assert_allclose(relaxed_descriptor(f, B), expect, atol=1e-12)


def test_binarize_zero_projection_sets_bit():
    B = np.zeros((8, 129))
    B[1, -1] = -1.0
    bits = unpack_bits(binarize(np.zeros(128), HashSiftModel(B)), 8)
    assert bits.tolist() == [True, False] + [True] * 6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 70))
def test_binarize_is_sign_of_relaxed_and_row_loop(seed, k):
    rng = np.random.default_rng(seed)
    m = HashSiftModel(rng.normal(0, 0.25, (k, 129)))
    f = sift_like(rng, 4)
    bits = unpack_bits(binarize(f, m), k)
    np.testing.assert_array_equal(bits, relaxed_descriptor(f, m.B) >= 0)
    for i, x in enumerate(f):
        for r in range(k):
            assert bits[i, r] == (float(np.dot(m.B[r, :128], x) + m.B[r, 128]) >= 0)


def test_describe_constant_patch_is_bias_sign():
    rng = np.random.default_rng(3)
    m = HashSiftModel(rng.normal(size=(20, 129)))
    bits = unpack_bits(hashsift.describe(np.full((32, 32), 40.0), m), 20)
    np.testing.assert_array_equal(bits, m.B[:, -1] >= 0)


def test_model_validation():
    with pytest.raises(ValueError):
        HashSiftModel(np.zeros((4, 128)))
    with pytest.raises(ValueError):
        HashSiftModel(np.full((4, 129), np.nan))


# -- loss and gradient -------------------------------------------------------------

def test_loss_zero_matrix():
    rng = np.random.default_rng(4)
    f = sift_like(rng, 9)
    assert hash_loss(f[:3], f[3:6], f[6:], np.zeros((8, 129)), 0.4) == pytest.approx(3 * 0.4)


def easy_batch():
    # anchor == positive; the negative flips every bit of a large-magnitude B
    rng = np.random.default_rng(5)
    f = sift_like(rng, 1)
    B = rng.normal(size=(16, 129)) * 50
    B[:, -1] = 0.0
    neg_dir = -(B[:, :128] @ f[0])  # projection of the negative must be opposite
    fn = np.linalg.lstsq(B[:, :128], neg_dir, rcond=None)[0][None]
    return f, f, fn, B


def test_loss_zero_on_easy_batch_and_zero_grad():
    fa, fp, fn, B = easy_batch()
    assert hash_loss(fa, fp, fn, B, 0.4) == 0.0
    np.testing.assert_array_equal(hash_loss_grad(fa, fp, fn, B, 0.4), 0.0)


def test_loss_termwise_and_permutation():
    rng = np.random.default_rng(6)
    f = sift_like(rng, 30)
    B = rng.normal(0, 0.5, (24, 129))
    fa, fp, fn = f[:10], f[10:20], f[20:]
    got = hash_loss(fa, fp, fn, B, 0.4)
    assert got == pytest.approx(loss_termwise(fa, fp, fn, B, 0.4), abs=1e-12)
    perm = rng.permutation(10)
    assert hash_loss(fa[perm], fp[perm], fn[perm], B, 0.4) == pytest.approx(got, abs=1e-12)
    with pytest.raises(ValueError):
        hash_loss(fa[:0], fp[:0], fn[:0], B, 0.4)


def fd_check(fa, fp, fn, B, tau, h=1e-5):
    """Max relative error between analytic and central-difference gradients,
    skipping entries whose perturbation lands within 1e-6 of a hinge kink."""
    g = hash_loss_grad(fa, fp, fn, B, tau)
    worst = 0.0
    for idx in np.ndindex(B.shape):
        Bp, Bm = B.copy(), B.copy()
        Bp[idx] += h
        Bm[idx] -= h
        zp, zm = hinge_args(fa, fp, fn, Bp, tau), hinge_args(fa, fp, fn, Bm, tau)
        if np.any(np.abs(zp) < 1e-6) or np.any(np.abs(zm) < 1e-6) or np.any(np.sign(zp) != np.sign(zm)):
            continue
        fd = (hash_loss(fa, fp, fn, Bp, tau) - hash_loss(fa, fp, fn, Bm, tau)) / (2 * h)
        denom = max(abs(fd), abs(g[idx]), 1e-7)
        worst = max(worst, abs(fd - g[idx]) / denom)
    return worst


def test_grad_at_zero_matrix():
    rng = np.random.default_rng(7)
    f = sift_like(rng, 6)
    assert fd_check(f[:2], f[2:4], f[4:], np.zeros((4, 129)), 0.4) < 1e-4


def test_grad_random_instances():
    rng = np.random.default_rng(8)
    for _ in range(3):
        f = sift_like(rng, 24)
        B = rng.normal(0, 0.25, (6, 129))
        assert fd_check(f[:8], f[8:16], f[16:], B, 0.4) < 1e-4


# -- Adam ----------------------------------------------------------------------------

def scalar_adam(b, grads, lr, b1, b2, eps):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        b = b - lr * mh / (math.sqrt(vh) + eps)
    return b


def test_adam_first_step_closed_form():
    cfg = HashTrainConfig()
    rng = np.random.default_rng(9)
    B, g = rng.normal(size=(3, 129)), rng.normal(size=(3, 129))
    B1, st1 = adam_step(B, g, AdamState.zeros_like(B), cfg)
    np.testing.assert_allclose(B1, B - cfg.learning_rate * g / (np.abs(g) + cfg.adam_eps), rtol=1e-12, atol=1e-15)
    assert st1.t == 1


def test_adam_zero_gradient_keeps_b():
    cfg = HashTrainConfig()
    B = np.random.default_rng(10).normal(size=(2, 129))
    state = AdamState.zeros_like(B)
    cur = B
    for _ in range(5):
        cur, state = adam_step(cur, np.zeros_like(B), state, cfg)
    np.testing.assert_array_equal(cur, B)


def test_adam_matches_scalar_recursion():
    cfg = HashTrainConfig(learning_rate=1e-2)
    rng = np.random.default_rng(11)
    B0 = rng.normal(size=(2, 129))
    grads = rng.normal(size=(10, 2, 129))
    B, state = B0, AdamState.zeros_like(B0)
    for g in grads:
        B, state = adam_step(B, g, state, cfg)
    for idx in [(0, 0), (1, 7), (0, 128), (1, 64)]:
        expect = scalar_adam(B0[idx], grads[(slice(None),) + idx], cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
        assert abs(B[idx] - expect) <= 1e-10


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros((2, 129)), np.zeros((3, 129)), AdamState.zeros_like(np.zeros((2, 129))), HashTrainConfig())


# -- training --------------------------------------------------------------------------

def test_training_deterministic_and_loss_decreases(tmp_path):
    ps = one_pixel_toy(30, seed=2, textured=True)
    cfg = HashTrainConfig(n_bits=8, steps=60, batch_size=32, learning_rate=5e-3, augment=None, seed=1)
    held = sift_describe_batch(one_pixel_toy(10, seed=2, textured=True).patches)
    fa, fp, fn = held[[0, 1, 10, 11]], held[[2, 3, 12, 13]], held[[10, 11, 0, 1]]
    init = hashsift.random_hash_model(8, np.random.default_rng(1)).B
    m1 = train_hashsift(ps, cfg)
    m2 = train_hashsift(ps, cfg)
    hashsift.save_model(m1, tmp_path / "a.txt")
    hashsift.save_model(m2, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert hash_loss(fa, fp, fn, m1.B, cfg.margin) < hash_loss(fa, fp, fn, init, cfg.margin)


def test_training_init_distribution():
    captured = []
    ps = one_pixel_toy(5, seed=0)
    cfg = HashTrainConfig(n_bits=200, steps=1, batch_size=4, augment=None, learning_rate=1e-12)
    train_hashsift(ps, cfg, callback=lambda step, B, loss: captured.append(B))
    assert captured[0].std() == pytest.approx(0.25, rel=0.05)


def test_config_validation():
    for kw in (dict(learning_rate=0.0), dict(steps=0), dict(init_sigma=-1.0)):
        with pytest.raises(ValueError):
            HashTrainConfig(**kw)


# -- files --------------------------------------------------------------------------------

def test_model_round_trip(tmp_path):
    m = HashSiftModel(np.random.default_rng(12).normal(size=(5, 129)), use_rootsift=True)
    path = tmp_path / "h.txt"
    hashsift.save_model(m, path)
    lines = path.read_text().splitlines()
    assert lines[:2] == ["HASHSIFT v1", "K 5 rootsift 1"]
    back = hashsift.load_model(path)
    np.testing.assert_array_equal(back.B, m.B)
    assert back.use_rootsift


def test_model_errors(tmp_path):
    path = tmp_path / "h.txt"
    path.write_text("HASHSIFT v2\nK 1 rootsift 0\n" + " ".join(["0"] * 129) + "\n")
    with pytest.raises(ModelFormatError):
        hashsift.load_model(path)
    path.write_text("HASHSIFT v1\nK 2 rootsift 0\n" + " ".join(["0"] * 129) + "\n")
    with pytest.raises(ModelFormatError, match="K=2"):
        hashsift.load_model(path)
    path.write_text("HASHSIFT v1\nK 1 rootsift 0\n" + " ".join(["0"] * 128) + "\n")
    with pytest.raises(ModelFormatError):
        hashsift.load_model(path)
