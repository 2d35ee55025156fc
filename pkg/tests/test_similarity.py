"""Metric correctness: closed forms, axioms, brute-force cross-checks."""

import math

import numpy as np
import pytest

from advlab.similarity import SsimConfig, distance, mse, psnr, ssim


def _imgs(seed=0, n=4, size=16):
    rng = np.random.default_rng(seed)
    return rng.random((n, size, size, 3))


def test_mse_matches_bruteforce_loop():
    a, b = _imgs(1, 2, 12)
    total = 0.0
    count = 0
    for i in range(12):
        for j in range(12):
            for c in range(3):
                total += (a[i, j, c] - b[i, j, c]) ** 2
                count += 1
    assert abs(mse(a, b) - total / count) < 1e-12


def test_mse_identity_and_symmetry():
    a, b = _imgs(2, 2)
    assert mse(a[0], a[0]) == 0.0
    assert mse(a[0], b[0]) == mse(b[0], a[0])
    assert mse(a[0], b[0]) > 0.0


def test_psnr_closed_form():
    # constant images differing by 0.25: mse = 1/16, psnr = 10*log10(16)
    a = np.full((8, 8, 3), 0.5)
    b = np.full((8, 8, 3), 0.75)
    assert abs(psnr(a, b) - 10.0 * math.log10(16.0)) < 1e-12


def test_psnr_identical_images_is_infinite():
    a = _imgs(3, 1)[0]
    assert psnr(a, a) == math.inf


def test_ssim_identity():
    for img in _imgs(4, 3):
        assert abs(ssim(img, img) - 1.0) < 1e-12


def test_ssim_symmetry_and_bounds():
    a, b = _imgs(5, 2)
    v = ssim(a, b)
    assert v == ssim(b, a)
    assert -1.0 <= v <= 1.0


def test_ssim_constant_images_closed_form():
    # zero-variance windows: ssim = (2*mx*my + c1) / (mx^2 + my^2 + c1)
    a = np.full((10, 10, 1), 0.4)
    b = np.full((10, 10, 1), 0.6)
    c1 = 0.01 ** 2
    want = (2 * 0.4 * 0.6 + c1) / (0.4 ** 2 + 0.6 ** 2 + c1)
    assert abs(ssim(a, b) - want) < 1e-12


def test_ssim_uniform_matches_bruteforce_windows():
    """Integral-image SSIM equals an explicit per-window computation."""
    rng = np.random.default_rng(6)
    a = rng.random((12, 12, 1))
    b = np.clip(a + rng.normal(0, 0.08, a.shape), 0, 1)
    k = 8
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(12 - k + 1):
        for j in range(12 - k + 1):
            wa = a[i:i + k, j:j + k, 0]
            wb = b[i:i + k, j:j + k, 0]
            ma, mb = wa.mean(), wb.mean()
            va, vb = wa.var(), wb.var()
            cov = ((wa - ma) * (wb - mb)).mean()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    assert abs(ssim(a, b) - np.mean(vals)) < 1e-9


def test_ssim_degrades_with_noise():
    base = _imgs(7, 1)[0]
    rng = np.random.default_rng(8)
    noise = rng.normal(0, 1, base.shape)
    small = np.clip(base + 0.02 * noise, 0, 1)
    large = np.clip(base + 0.30 * noise, 0, 1)
    assert ssim(base, small) > ssim(base, large)


def test_ssim_gaussian_window_runs_and_bounds():
    a, b = _imgs(9, 2)
    cfg = SsimConfig(window="gaussian")
    v = ssim(a, b, cfg)
    assert -1.0 <= v <= 1.0
    assert abs(ssim(a, a, cfg) - 1.0) < 1e-12


def test_shape_mismatch_rejected():
    a = np.zeros((8, 8, 3))
    b = np.zeros((9, 8, 3))
    for fn in (mse, psnr, ssim):
        with pytest.raises(ValueError):
            fn(a, b)


def test_distance_backends():
    a, b = _imgs(10, 2)
    assert distance(a, a) == 0.0
    assert abs(distance(a, b, metric="ssim") - (1.0 - ssim(a, b))) < 1e-15
    assert distance(a, b, metric="mse") == mse(a, b)
    # psnr distance: identical images map to 0, noisier pairs are farther
    assert distance(a, a, metric="psnr") == 0.0
    assert distance(a, b, metric="psnr") > 0.0
    with pytest.raises(ValueError):
        distance(a, b, metric="hamming")
