import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trical.costvolume import CostVolumeError, correlate, displacements, leaky_relu


def triple_loop(f_li, f_cam, d):
    c, h, w = f_li.shape
    out = np.zeros(((2 * d + 1) ** 2, h, w))
    m = 0
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            for y in range(h):
                for x in range(w):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        s = 0.0
                        for k in range(c):
                            s += f_li[k, y, x] * f_cam[k, yy, xx]
                        out[m, y, x] = s / c
            m += 1
    return out


def test_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(3):
        a = rng.normal(size=(8, 16, 32))
        b = rng.normal(size=(8, 16, 32))
        cv = correlate(a, b, 4)
        assert cv.shape == (81, 16, 32)
        assert np.max(np.abs(cv - triple_loop(a, b, 4))) < 1e-12


def test_displacement_order():
    ds = displacements(1)
    assert ds == [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)]
    assert len(displacements(4)) == 81


def test_all_ones_counts_valid_neighbors():
    ones = np.ones((3, 6, 7))
    cv = correlate(ones, ones, 2)
    assert cv[12].min() == 1.0  # zero displacement
    # corner pixel: only non-negative displacements stay inside
    corner = cv[:, 0, 0].reshape(5, 5)
    assert np.array_equal(corner, np.pad(np.ones((3, 3)), ((2, 0), (2, 0))))


def test_radius_zero_is_channel_mean_product():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 5, 4, 6))
    cv = correlate(a, b, 0)
    assert cv.shape == (1, 4, 6)
    assert np.allclose(cv[0], (a * b).mean(axis=0), rtol=0, atol=1e-15)


def test_transpose_property():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 4, 9, 11))
    d = 3
    ab = correlate(a, b, d)
    ba = correlate(b, a, d)
    h, w = a.shape[1:]
    for m, (dy, dx) in enumerate(displacements(d)):
        m_rev = displacements(d).index((-dy, -dx))
        for y in range(h):
            for x in range(w):
                if 0 <= y + dy < h and 0 <= x + dx < w:
                    assert ab[m, y, x] == pytest.approx(ba[m_rev, y + dy, x + dx], abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_linearity_in_lidar_features(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    a1, a2, b = rng.normal(size=(3, 4, 5, 6))
    lhs = correlate(alpha * a1 + beta * a2, b, 2)
    rhs = alpha * correlate(a1, b, 2) + beta * correlate(a2, b, 2)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_shape_mismatch_and_radius():
    with pytest.raises(CostVolumeError):
        correlate(np.zeros((8, 16, 32)), np.zeros((8, 16, 31)), 4)
    with pytest.raises(CostVolumeError):
        correlate(np.zeros((8, 4, 4)), np.zeros((8, 4, 4)), -1)


def test_leaky_relu():
    x = np.array([-2.0, -0.0, 0.0, 3.0])
    assert list(leaky_relu(x)) == [-0.2, 0.0, 0.0, 3.0]
    with pytest.raises(CostVolumeError):
        leaky_relu(x, 1.5)
