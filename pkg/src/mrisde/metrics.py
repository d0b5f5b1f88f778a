"""Reconstruction quality metrics and ensemble statistics."""

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import ParameterError, ShapeMismatchError, SizeError

PSNR_CAP_DB = 200.0

_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    kspace_residual: float = float("nan")
    notes: str = ""

    def to_dict(self):
        return {
            "psnr_db": self.psnr_db,
            "ssim": self.ssim,
            "kspace_residual": self.kspace_residual,
            "notes": self.notes,
        }


def _as_real_pair(ref, test):
    ref = np.asarray(ref, dtype=float)
    test = np.asarray(test, dtype=float)
    if ref.shape != test.shape:
        raise ShapeMismatchError(f"shape mismatch: {ref.shape} vs {test.shape}")
    return ref, test


def psnr(ref, test) -> float:
    """20 log10(max(ref) / rmse); identical images report the 200 dB cap.

    The reference peak is max(ref), so values are comparable across runs of
    this package rather than against any external convention.
    """
    ref, test = _as_real_pair(ref, test)
    peak = float(ref.max())
    if peak <= 0:
        raise ParameterError("reference image must have a positive peak")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return float(20.0 * np.log10(peak / np.sqrt(mse)))


def _gaussian_window():
    half = (_SSIM_WIN - 1) / 2.0
    coords = np.arange(_SSIM_WIN) - half
    g = np.exp(-0.5 * (coords / _SSIM_SIGMA) ** 2)
    win = np.outer(g, g)
    return win / win.sum()


def ssim(ref, test, symmetric_range: bool = False) -> float:
    """Mean local structural similarity with an 11x11 Gaussian window.

    Dynamic range defaults to max(ref) - min(ref); ``symmetric_range`` takes
    the union range of both images, which makes the metric symmetric in its
    arguments.
    """
    ref, test = _as_real_pair(ref, test)
    if min(ref.shape) < _SSIM_WIN:
        raise SizeError(f"images must be at least {_SSIM_WIN} pixels per side")
    if symmetric_range:
        drange = float(max(ref.max(), test.max()) - min(ref.min(), test.min()))
    else:
        drange = float(ref.max() - ref.min())
    if drange == 0:
        drange = 1.0
    c1 = (_SSIM_K1 * drange) ** 2
    c2 = (_SSIM_K2 * drange) ** 2

    win = _gaussian_window()

    def smooth(img):
        return convolve2d(img, win, mode="valid")

    mu_r = smooth(ref)
    mu_t = smooth(test)
    var_r = smooth(ref * ref) - mu_r**2
    var_t = smooth(test * test) - mu_t**2
    cov = smooth(ref * test) - mu_r * mu_t
    num = (2 * mu_r * mu_t + c1) * (2 * cov + c2)
    den = (mu_r**2 + mu_t**2 + c1) * (var_r + var_t + c2)
    return float(np.mean(num / den))


def pixelwise_stats(samples):
    """Per-pixel mean and population standard deviation of magnitude images."""
    if len(samples) < 2:
        raise ParameterError("need at least 2 samples")
    shapes = {np.shape(s) for s in samples}
    if len(shapes) != 1:
        raise ShapeMismatchError("samples must share one shape")
    stack = np.stack([np.abs(np.asarray(s)) for s in samples]).astype(float)
    # deviations are taken against the first sample so identical inputs give
    # exactly zero spread regardless of rounding in the mean
    shifted = stack - stack[0]
    dev_mean = shifted.mean(axis=0)
    mean = stack[0] + dev_mean
    std = np.sqrt(np.mean((shifted - dev_mean) ** 2, axis=0))
    return mean, std


def report(ref, test, kspace_residual: float = float("nan"), notes: str = "") -> MetricReport:
    """Bundle PSNR and SSIM of a magnitude pair into one record."""
    return MetricReport(
        psnr_db=psnr(ref, test), ssim=ssim(ref, test),
        kspace_residual=kspace_residual, notes=notes,
    )
