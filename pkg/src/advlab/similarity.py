"""Image similarity metrics: MSE, PSNR and windowed SSIM.

All metrics operate on float arrays shaped (height, width, channels) with
pixel values in [0, 1] (dynamic range L = 1.0 by default).  They are pure
functions and are used both directly and as the distance backends of the
query-stream detector in :mod:`advlab.defenses`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SsimConfig",
    "mse",
    "psnr",
    "ssim",
    "distance",
]


@dataclass(frozen=True)
class SsimConfig:
    """Windowing and stabilizer constants for SSIM.

    The default is a uniform 8x8 sliding window; ``window="gaussian"``
    switches to an 11x11 Gaussian window with sigma 1.5.  C1 = (k1*L)^2 and
    C2 = (k2*L)^2 stabilize the luminance and contrast terms.
    """

    window: str = "uniform"  # "uniform" | "gaussian"
    window_size: int = 8
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.window not in ("uniform", "gaussian"):
            raise ValueError(f"unknown window kind {self.window!r}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("stabilizers k1, k2 must be positive")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")


GAUSSIAN_WINDOW_SIZE = 11


def _as_hwc(a: np.ndarray) -> np.ndarray:
    """View ``a`` as (H, W, C), adding a channel axis to 2-D input."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[:, :, None]
    if a.ndim == 3:
        return a
    raise ValueError(f"expected a 2-D or 3-D image, got shape {a.shape}")


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared pixel difference over all pixels and channels."""
    a = _as_hwc(a)
    b = _as_hwc(b)
    _check_same_shape(a, b)
    d = a - b
    return float(np.mean(d * d))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio, 10*log10(L^2 / mse).

    Identical images have zero MSE; the PSNR is then infinite and the
    function returns ``math.inf`` as the sentinel.
    """
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / err)


def _integral(img: np.ndarray) -> np.ndarray:
    """Zero-padded 2-D summed-area table per channel, shape (H+1, W+1, C)."""
    h, w, c = img.shape
    ii = np.zeros((h + 1, w + 1, c), dtype=np.float64)
    ii[1:, 1:] = img.cumsum(axis=0).cumsum(axis=1)
    return ii


def _window_sums(ii: np.ndarray, k: int) -> np.ndarray:
    """Sums over all k x k windows (stride 1) from a summed-area table."""
    return ii[k:, k:] - ii[:-k, k:] - ii[k:, :-k] + ii[:-k, :-k]


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed_moments_uniform(a, b, size):
    """(mu_a, mu_b, E[a^2], E[b^2], E[ab]) over uniform windows."""
    n = float(size * size)
    sa = _window_sums(_integral(a), size)
    sb = _window_sums(_integral(b), size)
    saa = _window_sums(_integral(a * a), size)
    sbb = _window_sums(_integral(b * b), size)
    sab = _window_sums(_integral(a * b), size)
    return sa / n, sb / n, saa / n, sbb / n, sab / n


def _windowed_moments_gaussian(a, b, size, sigma):
    kern = _gaussian_kernel(size, sigma)

    def filt(x):
        # (Ph, Pw, size, size, C) windows; weighted sum over the window axes.
        win = np.lib.stride_tricks.sliding_window_view(x, (size, size), axis=(0, 1))
        return np.einsum("ijcxy,xy->ijc", win, kern)

    return filt(a), filt(b), filt(a * a), filt(b * b), filt(a * b)


def ssim(a: np.ndarray, b: np.ndarray, config: SsimConfig | None = None) -> float:
    """Mean local structural similarity between two images, in [-1, 1].

    Local SSIM is computed on every window position (stride 1) of every
    channel and averaged.  ``ssim(x, x)`` is exactly 1.0 and the metric is
    symmetric bit-for-bit.
    """
    cfg = config or SsimConfig()
    a = _as_hwc(a)
    b = _as_hwc(b)
    _check_same_shape(a, b)

    size = GAUSSIAN_WINDOW_SIZE if cfg.window == "gaussian" else cfg.window_size
    if size > a.shape[0] or size > a.shape[1]:
        raise ValueError(
            f"window size {size} does not fit inside image of shape {a.shape[:2]}"
        )

    if cfg.window == "gaussian":
        mu_a, mu_b, eaa, ebb, eab = _windowed_moments_gaussian(a, b, size, cfg.sigma)
    else:
        mu_a, mu_b, eaa, ebb, eab = _windowed_moments_uniform(a, b, size)

    var_a = eaa - mu_a * mu_a
    var_b = ebb - mu_b * mu_b
    cov = eab - mu_a * mu_b

    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def distance(a: np.ndarray, b: np.ndarray, metric: str = "ssim",
             ssim_config: SsimConfig | None = None) -> float:
    """Non-negative dissimilarity used by the query-stream detector.

    ssim -> 1 - ssim(a, b); mse -> mse(a, b); psnr -> 10^(-psnr/10), which
    equals mse / L^2 and maps the infinite identical-image PSNR to 0.
    """
    if metric == "ssim":
        return 1.0 - ssim(a, b, ssim_config)
    if metric == "mse":
        return mse(a, b)
    if metric == "psnr":
        p = psnr(a, b)
        return 0.0 if math.isinf(p) else 10.0 ** (-p / 10.0)
    raise ValueError(f"unknown similarity metric {metric!r}")
