import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from bindesc.imaging import (
    AugmentDraw, AugmentParams, Keypoint, apply_augment, augment_patch, box_average,
    integral_image, normalize_patch, rect_sum,
)


def direct_box_sum(img, r1, c1, r2, c2):
    total = 0
    for r in range(r1, r2):
        for c in range(c1, c2):
            total += img[r, c]
    return total


def direct_box_mean(img, x, y, s):
    h, w = img.shape
    vals = [img[r, c]
            for r in range(y - s // 2, y - s // 2 + s)
            for c in range(x - s // 2, x - s // 2 + s)
            if 0 <= r < h and 0 <= c < w]
    return sum(vals) / len(vals), min(vals), max(vals)


# -- integral image ----------------------------------------------------------

def test_integral_single_pixel():
    np.testing.assert_array_equal(integral_image(np.array([[5]])), [[0, 0], [0, 5]])


def test_integral_two_by_two():
    ii = integral_image(np.array([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(ii, [[0, 0, 0], [0, 1, 3], [0, 4, 10]])


def test_integral_every_box_on_8x8():
    img = np.random.default_rng(0).integers(0, 256, size=(8, 8))
    ii = integral_image(img)
    for r1 in range(9):
        for r2 in range(r1, 9):
            for c1 in range(9):
                for c2 in range(c1, 9):
                    assert rect_sum(ii, r1, c1, r2, c2) == direct_box_sum(img, r1, c1, r2, c2)


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 255)),
       st.data())
def test_integral_rectangle_identity(img, data):
    h, w = img.shape
    r1 = data.draw(st.integers(0, h)); r2 = data.draw(st.integers(r1, h))
    c1 = data.draw(st.integers(0, w)); c2 = data.draw(st.integers(c1, w))
    assert rect_sum(integral_image(img), r1, c1, r2, c2) == direct_box_sum(img, r1, c1, r2, c2)


# -- box average -------------------------------------------------------------

@pytest.mark.parametrize("center,s", [((0, 0), 1), ((3, 4), 5), ((7, 7), 32), ((0, 7), 4)])
def test_box_average_constant(center, s):
    ii = integral_image(np.full((8, 8), 37.0))
    assert box_average(ii, center, s) == pytest.approx(37.0)


def test_box_average_single_pixel_x_is_column():
    ii = integral_image(np.array([[0, 255], [0, 255]]))
    assert box_average(ii, (1, 0), 1) == 255


def test_box_average_interior_5x5():
    img = np.random.default_rng(1).uniform(0, 255, size=(16, 16))
    assert box_average(integral_image(img), (7, 9), 5) == pytest.approx(img[7:12, 5:10].mean(), abs=1e-9)


@pytest.mark.parametrize("center,s", [((1, 1), 0), ((8, 0), 3), ((0, -1), 3)])
def test_box_average_rejects(center, s):
    with pytest.raises(ValueError):
        box_average(integral_image(np.zeros((8, 8))), center, s)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (10, 10), elements=st.floats(0, 255)),
       st.integers(0, 9), st.integers(0, 9), st.integers(1, 14))
def test_box_average_clamped_matches_direct(img, x, y, s):
    got = box_average(integral_image(img), (x, y), s)
    mean, lo, hi = direct_box_mean(img, x, y, s)
    assert got == pytest.approx(mean, abs=1e-9)
    assert lo - 1e-9 <= got <= hi + 1e-9


# -- normalize_patch -----------------------------------------------------------

def smooth_image(n, seed=0):
    yy, xx = np.mgrid[:n, :n] / n
    rng = np.random.default_rng(seed)
    a, b, c = rng.uniform(1, 3, size=3)
    return 128 + 60 * np.sin(a * 2 * np.pi * xx) * np.cos(b * 2 * np.pi * yy) + 30 * np.sin(c * xx * yy * 6)


def test_normalize_identity_resample():
    img = np.random.default_rng(2).uniform(0, 255, size=(32, 32))
    kp = Keypoint(15.5, 15.5, diameter=32 / 6.75, orientation=0.0)
    p = normalize_patch(img, kp)
    assert np.max(np.abs(p - img)) <= 1.0


def test_normalize_rotation_of_constant():
    img = np.full((40, 40), 77.0)
    p = normalize_patch(img, Keypoint(20, 20, 4.0, np.pi))
    np.testing.assert_allclose(p, 77.0)


def test_normalize_quarter_turn_matches_inverse_mapping():
    # asymmetric test card: a gradient plus an off-centre block
    img = np.add.outer(np.arange(48) * 2.0, np.arange(48) * 0.5)
    img[10:18, 30:40] += 60
    kp = Keypoint(23.5, 23.5, diameter=32 / 6.75, orientation=np.pi / 2)
    p = normalize_patch(img, kp)
    # per-pixel oracle: patch pixel (i, j) looks at offset rotated by +90 deg
    expect = np.empty((32, 32))
    for i in range(32):
        for j in range(32):
            dj, di = j - 15.5, i - 15.5
            x = kp.x + (0 * dj - 1 * di)
            y = kp.y + (1 * dj + 0 * di)
            expect[i, j] = img[int(round(y)), int(round(x))]
    assert np.max(np.abs(p - expect)) <= 1.0 + 1e-9
    # and it equals numpy's rot90 of the axis-aligned crop
    crop = img[8:40, 8:40]
    np.testing.assert_allclose(p, np.rot90(crop, k=1), atol=1.0)


def test_normalize_scale_covariance():
    small = smooth_image(64)
    yy, xx = np.mgrid[:128, :128]
    big = ndimage.map_coordinates(small, [(yy - 0.5) / 2, (xx - 0.5) / 2], order=3, mode="nearest")
    p1 = normalize_patch(small, Keypoint(31.5, 31.5, 5.0, 0.3))
    p2 = normalize_patch(big, Keypoint(63.5, 63.5, 10.0, 0.3))
    assert np.max(np.abs(p1 - p2)) <= 2.0


def test_normalize_rejects_disjoint():
    with pytest.raises(ValueError):
        normalize_patch(np.zeros((20, 20)), Keypoint(500, 500, 2.0, 0.0))


# -- augmentation ------------------------------------------------------------

def test_augment_zero_params_is_identity():
    p = np.random.default_rng(3).uniform(0, 255, size=(32, 32))
    np.testing.assert_array_equal(augment_patch(p, AugmentParams(), np.random.default_rng(0)), p)


def test_augment_illumination_shift():
    draw = AugmentDraw(rotation=0.0, scale=1.0, illumination=10.0, blur_sigma=0.0, noise_sigma=0.0)
    np.testing.assert_allclose(apply_augment(np.full((32, 32), 100.0), draw), 110.0)


def test_augment_illumination_only_params():
    out = augment_patch(np.full((32, 32), 100.0), AugmentParams(illumination_delta=10.0), np.random.default_rng(4))
    assert np.ptp(out) == 0 and 90.0 <= out[0, 0] <= 110.0


def test_augment_deterministic_with_seed():
    p = np.random.default_rng(5).uniform(0, 255, size=(32, 32))
    a = augment_patch(p, AugmentParams.small(), np.random.default_rng(9))
    b = augment_patch(p, AugmentParams.small(), np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 255


def test_augment_params_validation():
    with pytest.raises(ValueError):
        AugmentParams(scale_range=(1.1, 1.2))
    with pytest.raises(ValueError):
        AugmentParams(noise_sigma=-1)
