import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import correlate1d

from adl.atw import B3_SPLINE, atw_decompose, atw_decompose_array, atw_details, upsample_kernel
from adl.autodiff import Tensor


def _scipy_atw(x, levels):
    """Independent a trous pyramid: scipy separable filtering with mirrored borders."""
    c = x
    details = []
    for j in range(1, levels + 1):
        k = upsample_kernel(B3_SPLINE, j)
        nxt = c
        for ax in range(x.ndim):
            nxt = correlate1d(nxt, k, axis=ax, mode="reflect")
        details.append(c - nxt)
        c = nxt
    return c, details


def test_upsample_kernel_inserts_holes():
    k = upsample_kernel(B3_SPLINE, 3)
    assert k.size == 17
    np.testing.assert_array_equal(k[::4], B3_SPLINE)
    assert np.count_nonzero(k) == 5
    with pytest.raises(ValueError):
        upsample_kernel(B3_SPLINE, 0)


def test_impulse_first_detail_centre():
    # 1 - (6/16)^2 for a separable 2-d smoothing
    x = np.zeros((9, 9))
    x[4, 4] = 1.0
    _, details = atw_decompose_array(x, 1)
    assert details[0][4, 4] == pytest.approx(0.859375, abs=1e-15)


@pytest.mark.parametrize("shape", [(40,), (21, 17), (12, 10, 9)])
def test_matches_scipy_reference(shape):
    rng = np.random.default_rng(len(shape))
    x = rng.normal(size=shape)
    approx, details = atw_decompose_array(x, 3)
    ref_c, ref_d = _scipy_atw(x, 3)
    np.testing.assert_allclose(approx[-1], ref_c, atol=1e-13)
    for a, b in zip(details, ref_d):
        np.testing.assert_allclose(a, b, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(
    x=arrays(np.float64, st.tuples(st.integers(5, 24), st.integers(5, 24)), elements=st.floats(-10, 10)),
    levels=st.integers(1, 4),
)
def test_perfect_reconstruction(x, levels):
    approx, details = atw_decompose_array(x, levels)
    rec = approx[-1] + sum(details)
    assert np.max(np.abs(rec - x)) < 1e-10


@settings(max_examples=20, deadline=None)
@given(value=st.floats(-100, 100), shape=st.sampled_from([(33,), (16, 9), (6, 7, 8)]))
def test_constant_has_no_detail(value, shape):
    _, details = atw_decompose_array(np.full(shape, value), 4)
    for d in details:
        assert np.max(np.abs(d)) < 1e-12


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_details_are_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 12, 12))
    _, dx = atw_decompose_array(x, 3)
    _, dy = atw_decompose_array(y, 3)
    _, dxy = atw_decompose_array(a * x + b * y, 3)
    for p, q, r in zip(dx, dy, dxy):
        np.testing.assert_allclose(r, a * p + b * q, atol=1e-10)


def test_pyramid_object_and_batch_layout():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 10, 10))
    pyr = atw_decompose(Tensor(x), 4)
    assert pyr.levels == 4
    assert len(pyr.approximations) == 5
    np.testing.assert_allclose(pyr.reconstruct(), x, atol=1e-12)
    # each (sample, channel) is decomposed independently
    _, d = atw_decompose_array(x[1, 2], 4)
    np.testing.assert_allclose(atw_details(Tensor(x), 4)[3].data[1, 2], d[3], atol=1e-13)


def test_small_images_deep_levels():
    # dilated support exceeds the image; mirrored indexing keeps it well defined
    x = np.random.default_rng(6).normal(size=(1, 1, 4, 4))
    pyr = atw_decompose(Tensor(x), 4)
    np.testing.assert_allclose(pyr.reconstruct(), x, atol=1e-12)


def test_errors():
    with pytest.raises(ValueError):
        atw_decompose(Tensor(np.ones((1, 1, 8))), 0)
    with pytest.raises(ValueError):
        atw_decompose(Tensor(np.ones((8, 8))), 2)
    with pytest.raises(ValueError):
        atw_decompose(Tensor(np.ones((1, 1, 8))), 2, base=np.array([1.0, 1.0]) / 2)
    with pytest.raises(ValueError):
        atw_decompose(Tensor(np.ones((1, 1, 8))), 2, base=np.array([1.0, 1.0, 1.0]))
