import colorsys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nflba.geometry import Intrinsics
from nflba.shading import (MaskSet, backproject, center_crop_mask, clamp_count, estimate_albedo,
                           shading_field, shading_from_depth, specular_mask, srgb_to_linear)

K = Intrinsics(10.0, 12.0, 4.0, 3.0, 8, 6)


def test_backproject_examples():
    d = np.zeros((6, 8))
    d[3, 4] = 3.0          # principal point
    d[3, 4 + 0] = 3.0
    X = backproject(d, K)
    np.testing.assert_allclose(X[3, 4], [0, 0, 3])
    k = Intrinsics(2.0, 2.0, 1.0, 1.0, 4, 4)
    d = np.full((4, 4), 2.0)
    np.testing.assert_allclose(backproject(d, k)[1, 3], [2, 0, 2])
    np.testing.assert_allclose(backproject(np.zeros((4, 4)), k), 0)


def _field(X, N, beta=0.0):
    return shading_field(np.array([X], float), np.array([N], float), beta)


def test_shading_frontal():
    f = _field([0, 0, 2], [0, 0, -1])
    np.testing.assert_allclose(f.light_dir[0], [0, 0, -1])
    assert f.attenuation[0] == 0.25 and f.shading[0] == 0.25


def test_shading_cosine_law():
    n = [np.sin(np.pi / 3), 0, -np.cos(np.pi / 3)]
    assert abs(_field([0, 0, 2], n).shading[0] - 0.125) < 1e-12


def test_shading_back_facing_is_zero():
    assert _field([0, 0, 2], [0, 0, 1]).shading[0] == 0


def test_shading_singular_point_invalid():
    f = _field([0, 0, 0], [0, 0, -1])
    assert not f.valid[0] and f.shading[0] == 0


def test_inverse_square_law():
    d = np.linspace(1, 50, 30)
    X = np.column_stack([np.zeros(30), np.zeros(30), d])
    N = np.tile([0, 0, -1.0], (30, 1))
    S = shading_field(X, N).shading
    np.testing.assert_allclose(S * d**2, 1.0, rtol=1e-9)


@settings(max_examples=30)
@given(st.floats(0.1, 10))
def test_global_rescale(kf):
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (50, 3)) + [0, 0, 4]
    N = rng.normal(size=(50, 3))
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    a, b = shading_field(X, N).shading, shading_field(kf * X, N).shading
    np.testing.assert_allclose(b, a / kf**2, rtol=1e-9, atol=1e-15)


def test_angular_term_on_axis_is_one():
    f = _field([0, 0, 2], [0, 0, -1], beta=3.0)
    assert abs(f.shading[0] - 0.25) < 1e-12
    g = _field([1, 0, 1], [0, 0, -1], beta=2.0)
    assert g.shading[0] < _field([1, 0, 1], [0, 0, -1], beta=0.0).shading[0]


def test_shading_from_depth_masks_near():
    d = np.full((6, 8), 2.0)
    d[0, 0] = 0.0
    N = np.zeros((6, 8, 3))
    N[..., 2] = -1
    f = shading_from_depth(d, N, K, near=0.1)
    assert not f.valid[0, 0] and f.valid[1, 1]


def test_srgb_to_linear():
    assert srgb_to_linear(np.array(0.0)) == 0 and srgb_to_linear(np.array(1.0)) == 1
    assert abs(srgb_to_linear(np.array(0.5), 2.2) - 0.21764) < 1e-5
    x = np.linspace(0, 1, 11)
    np.testing.assert_array_equal(srgb_to_linear(x, 1.0), x)


def test_srgb_to_linear_clamps_and_counts():
    before = clamp_count()
    out = srgb_to_linear(np.array([-0.1, 1.2]))
    np.testing.assert_array_equal(out, [0.0, 1.0])
    assert clamp_count() == before + 2


def test_albedo_examples():
    img = np.array([[[0.3, 0.3, 0.3], [0.5, 0.25, 0.25], [0, 0, 0]]])
    a = estimate_albedo(img, 2.2)
    np.testing.assert_allclose(a[0, 0], 1.0)
    np.testing.assert_allclose(a[0, 1], [1.0, 0.5**2.2, 0.5**2.2], rtol=1e-12)
    np.testing.assert_allclose(a[0, 2], 1.0)


def test_albedo_matches_reference_hsv(rng):
    img = rng.uniform(0.05, 1, (5, 5, 3))
    a = estimate_albedo(img, 2.2)
    for y in range(5):
        for x in range(5):
            h, s, _ = colorsys.rgb_to_hsv(*img[y, x])
            ref = np.array(colorsys.hsv_to_rgb(h, s, 1.0)) ** 2.2
            np.testing.assert_allclose(a[y, x], ref, rtol=1e-9)


def test_albedo_max_channel_is_one(rng):
    a = estimate_albedo(rng.uniform(0.01, 1, (10, 10, 3)))
    np.testing.assert_allclose(a.max(axis=-1), 1.0, rtol=1e-12)


def test_specular_mask_examples():
    img = np.full((5, 5, 3), 0.5)
    assert specular_mask(img, 0.9).all()
    img[2, 2] = 1.0
    m = specular_mask(img, 0.9)
    assert not m[1:4, 1:4].any() and m.sum() == 25 - 9
    assert specular_mask(img, 1.0 + 1e-9).all()


def test_specular_mask_monotone(rng):
    img = rng.uniform(0, 1, (12, 12, 3))
    lo, hi = specular_mask(img, 0.7), specular_mask(img, 0.9)
    assert np.all(lo <= hi)


def test_crop_examples():
    assert center_crop_mask(6, 4, 1.0).all()
    m = center_crop_mask(8, 8, 0.5)
    assert m[2:6, 2:6].all() and m.sum() == 16


@pytest.mark.parametrize("w,h,f", [(7, 7, 0.5), (9, 5, 0.75), (10, 3, 0.3), (64, 64, 0.75)])
def test_crop_index_oracle(w, h, f):
    def rng_(n):
        side = min(n, max(2, 2 * int(round(f * n / 2))))
        lo = (n - side) // 2
        return set(range(lo, lo + side))
    m = center_crop_mask(w, h, f)
    ys, xs = rng_(h), rng_(w)
    for y in range(h):
        for x in range(w):
            assert m[y, x] == (y in ys and x in xs)


@pytest.mark.parametrize("f", [0.0, -0.1, 1.5])
def test_crop_rejects_bad_fraction(f):
    with pytest.raises(ValueError):
        center_crop_mask(8, 8, f)


def test_maskset_combined_subset(rng):
    a, b, c = (rng.uniform(size=(6, 6)) > 0.3 for _ in range(3))
    m = MaskSet(a, b, c).combined
    assert np.all(m <= a) and np.all(m <= b) and np.all(m <= c)
