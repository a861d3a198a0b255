import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from taigan.metrics import mse, nmae, paired_t_test, psnr, ssim


def test_identical_volumes():
    a = np.random.default_rng(0).uniform(-1, 1, (8, 8, 8))
    assert mse(a, a) == 0 and nmae(a, a) == 0 and psnr(a, a) == math.inf


def test_nmae_anchor():
    assert nmae([0.0, 1.0], [0.0, 2.0]) == 0.25


def test_psnr_anchor():
    b = np.zeros(100)
    b[0], b[1] = -1.0, 1.0
    a = b + np.where(np.arange(100) % 2 == 0, 0.2, -0.2)  # mse 0.04
    assert math.isclose(mse(a, b), 0.04)
    assert math.isclose(psnr(a, b), 20.0, abs_tol=1e-9)


def test_constant_reference_rejected():
    with pytest.raises(ValueError):
        nmae([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(ValueError):
        psnr([1.0, 2.0], [3.0, 3.0])


def test_shape_mismatch_rejected():
    for f in (mse, nmae, psnr, ssim):
        with pytest.raises(ValueError, match="shape"):
            f(np.zeros((8, 8, 8)), np.zeros((8, 8, 7)))


def test_ssim_identical():
    a = np.random.default_rng(1).uniform(-1, 1, (9, 9, 9))
    assert math.isclose(ssim(a, a), 1.0, rel_tol=1e-12)


def test_ssim_equal_constants():
    assert ssim(np.zeros((7, 7, 7)), np.zeros((7, 7, 7))) == 1.0


def test_ssim_constant_pair_is_luminance_term():
    c1 = (0.01 * 2) ** 2
    got = ssim(np.ones((8, 8, 8)), np.zeros((8, 8, 8)))
    assert math.isclose(got, c1 / (1 + c1), rel_tol=1e-9)
    assert abs(got - 4.0e-4) < 1e-6


def test_ssim_small_volume_rejected():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((6, 8, 8)), np.zeros((6, 8, 8)))


def test_ssim_brute_force_window():
    # direct per-window evaluation at valid positions
    rng = np.random.default_rng(2)
    a, b = rng.uniform(-1, 1, (8, 9, 7)), rng.uniform(-1, 1, (8, 9, 7))
    c1, c2 = 0.02**2, 0.06**2
    vals = []
    for i in range(2):
        for j in range(3):
            wa, wb = a[i : i + 7, j : j + 7, :], b[i : i + 7, j : j + 7, :]
            ma, mb = wa.mean(), wb.mean()
            va, vb, cab = wa.var(), wb.var(), ((wa - ma) * (wb - mb)).mean()
            vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    assert math.isclose(ssim(a, b), np.mean(vals), rel_tol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_ssim_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (7, 8, 7)), rng.uniform(-1, 1, (7, 8, 7))
    assert math.isclose(ssim(a, b), ssim(b, a), rel_tol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(1.01, 3.0))
def test_psnr_decreases_with_mse(s, factor):
    b = np.linspace(-1, 1, 50)
    noise = np.sin(np.arange(50.0))
    assert psnr(b + s * factor * noise, b) < psnr(b + s * noise, b)


# ---------------------------------------------------------------- t-test


def test_t_test_identical():
    assert paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == (0.0, 1.0)


def test_t_test_anchor():
    t, p = paired_t_test([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    assert math.isclose(t, 2 / (1 / math.sqrt(3)), rel_tol=1e-12)
    # Student t oracle (df=2): P(|T|>t) = 1 - t/sqrt(t^2+2)
    assert math.isclose(p, 1 - t / math.sqrt(t * t + 2), rel_tol=1e-10)
    assert abs(p - 0.0742) < 1e-4


def test_t_test_zero_variance_nonzero_mean():
    t, p = paired_t_test([2.0, 3.0], [1.0, 2.0])
    assert p == 0.0 and t > 0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-100, 100)),
       arrays(np.float64, 12, elements=st.floats(-100, 100)))
def test_t_test_matches_scipy_and_flips(x, y):
    y = y[: x.size]
    d = x - y
    assume(np.std(d) > 1e-6 * (1 + np.abs(d).max()))
    t, p = paired_t_test(x, y)
    ref = stats.ttest_rel(x, y)
    assert math.isclose(t, ref.statistic, rel_tol=1e-8)
    assert math.isclose(p, ref.pvalue, rel_tol=1e-6, abs_tol=1e-12)
    t2, p2 = paired_t_test(y, x)
    assert t2 == -t and p2 == p


def test_t_test_length_checks():
    with pytest.raises(ValueError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(ValueError):
        paired_t_test([1.0, 2.0], [2.0])
