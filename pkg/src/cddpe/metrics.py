"""PSNR and single-scale SSIM for unit-range grayscale images."""

import dataclasses

import numpy as np

from .errors import DimensionError

PSNR_CAP = 100.0

_K1 = 0.01
_K2 = 0.03
_WINDOW = 11
_SIGMA = 1.5


def _as2d(img):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-d image, got shape {arr.shape}")
    return arr


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for data range 1.0, capped at 100."""
    a, b = _as2d(a), _as2d(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(-10.0 * np.log10(mse), PSNR_CAP)


def _gaussian_window():
    t = np.arange(_WINDOW, dtype=np.float64) - (_WINDOW - 1) / 2.0
    k = np.exp(-0.5 * (t / _SIGMA) ** 2)
    return k / k.sum()


def _filter_valid(img, k):
    """Separable valid-mode correlation with a 1-d window k."""
    n = k.size
    win = np.lib.stride_tricks.sliding_window_view(img, n, axis=0)
    rows = win @ k
    win = np.lib.stride_tricks.sliding_window_view(rows, n, axis=1)
    return win @ k


def ssim(a, b):
    """Structural similarity, 11x11 Gaussian window (sigma 1.5), K1=0.01,
    K2=0.03, mean over valid windows."""
    a, b = _as2d(a), _as2d(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < _WINDOW:
        raise DimensionError(f"ssim needs images of at least {_WINDOW}x{_WINDOW}")
    c1 = _K1 ** 2
    c2 = _K2 ** 2
    k = _gaussian_window()
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a**2
    var_b = _filter_valid(b * b, k) - mu_b**2
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclasses.dataclass
class MetricReport:
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float

    @classmethod
    def from_samples(cls, psnrs, ssims):
        return cls(float(np.mean(psnrs)), float(np.std(psnrs)),
                   float(np.mean(ssims)), float(np.std(ssims)))
