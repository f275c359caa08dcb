"""Full-reference image/volume quality metrics.

All metrics expect data on the nominal [0, 255] scale and work on 2-D planes
or 3-D volumes (SSIM and GMSD extend their windows/kernels to 3-D).  Window
positions are restricted to the valid region -- no padding is invented at the
borders -- and computation is float64 throughout.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate, correlate1d

from .exceptions import DomainError, ShapeError

__all__ = ["psnr", "ssim", "gmsd", "snr_vascular", "nrmse"]


def _check_pair(a, b, ndim=(2, 3)):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim not in ndim:
        raise ShapeError(f"expected {ndim}-D arrays, got {a.ndim}-D")
    return a, b


def psnr(img, ref, peak: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB.

    By default ``peak`` is the maximum value of the *evaluated* image ``img``;
    pass ``peak=255.0`` for the fixed-range convention.  Identical inputs give
    ``inf``.
    """
    img, ref = _check_pair(img, ref, ndim=(1, 2, 3))
    mse = np.mean((img - ref) ** 2)
    if mse == 0.0:
        return float("inf")
    p = float(np.max(img)) if peak is None else float(peak)
    if p <= 0:
        raise DomainError(f"peak must be positive, got {p}")
    return float(10.0 * np.log10(p * p / mse))


def _gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def _windowed_mean(x: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Separable Gaussian-weighted window mean, cropped to the valid region."""
    half = (k1d.size - 1) // 2
    out = x
    for axis in range(x.ndim):
        out = correlate1d(out, k1d, axis=axis, mode="constant")
    sl = tuple(slice(half, s - half) for s in x.shape)
    return out[sl]


def ssim(a, b, *, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, L: float = 255.0) -> float:
    """Mean structural similarity over all fully-interior window positions.

    The window is an isotropic unit-sum Gaussian (11 taps, sigma 1.5 per axis
    by default); 3-D inputs use the 11x11x11 extension of the same kernel.
    """
    a, b = _check_pair(a, b)
    if any(s < window for s in a.shape):
        raise ShapeError(f"image shape {a.shape} smaller than window {window}")
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2
    k1d = _gaussian_kernel1d(window, sigma)

    mu_a = _windowed_mean(a, k1d)
    mu_b = _windowed_mean(b, k1d)
    var_a = _windowed_mean(a * a, k1d) - mu_a * mu_a
    var_b = _windowed_mean(b * b, k1d) - mu_b * mu_b
    cov = _windowed_mean(a * b, k1d) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _prewitt_kernels(ndim: int) -> list[np.ndarray]:
    """Prewitt derivative kernels: [-1, 0, 1] along one axis, uniform
    smoothing (1/3 per tap) along the others."""
    deriv = np.array([-1.0, 0.0, 1.0])
    smooth = np.full(3, 1.0 / 3.0)
    kernels = []
    for axis in range(ndim):
        k = np.array(1.0)
        for ax in range(ndim):
            vec = deriv if ax == axis else smooth
            k = np.tensordot(k, vec, axes=0) if k.ndim else np.multiply.outer(k, vec)
        kernels.append(k.reshape((3,) * ndim))
    return kernels


def _valid_correlate(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    full = correlate(x, k, mode="constant")
    sl = tuple(slice(1, s - 1) for s in x.shape)
    return full[sl]


def gmsd(a, b, *, T: float = 170.0) -> float:
    """Gradient-magnitude similarity deviation (population std of the GMS map).

    Gradients use Prewitt operators (2-D: 3x3 with 1/3 smoothing; 3-D: the
    same operator smoothed uniformly along the third axis), evaluated on the
    valid interior.  0 means identical gradient structure.
    """
    a, b = _check_pair(a, b)
    if any(s < 3 for s in a.shape):
        raise ShapeError(f"image shape {a.shape} too small for 3-tap gradients")
    ga = np.zeros_like(a[tuple(slice(1, s - 1) for s in a.shape)])
    gb = np.zeros_like(ga)
    for k in _prewitt_kernels(a.ndim):
        da = _valid_correlate(a, k)
        db = _valid_correlate(b, k)
        ga += da * da
        gb += db * db
    ma = np.sqrt(ga)
    mb = np.sqrt(gb)
    gms = (2.0 * ma * mb + T) / (ma * ma + mb * mb + T)
    return float(np.std(gms))


def snr_vascular(vol, vessel_mask, noise_mask) -> float:
    """Linear SNR: mean signal over vessels / std over an avascular region."""
    vol = np.asarray(vol, dtype=np.float64)
    vm = np.asarray(vessel_mask, dtype=bool)
    nm = np.asarray(noise_mask, dtype=bool)
    if vol.shape != vm.shape or vol.shape != nm.shape:
        raise ShapeError("volume and masks must share a shape")
    if not vm.any():
        raise DomainError("vessel mask is empty")
    if nm.sum() < 2:
        raise DomainError("noise mask needs at least 2 voxels")
    sd = float(np.std(vol[nm]))
    if sd == 0.0:
        raise DomainError("noise region has zero variance")
    return float(np.mean(vol[vm]) / sd)


def nrmse(values, reference) -> float:
    """RMS of (values - reference), normalised by the reference mean."""
    v = np.asarray(values, dtype=np.float64).ravel()
    r = np.asarray(reference, dtype=np.float64).ravel()
    if v.size != r.size:
        raise ShapeError(f"lengths differ: {v.size} vs {r.size}")
    if v.size == 0:
        raise DomainError("empty inputs")
    m = r.mean()
    if m == 0.0:
        raise DomainError("reference mean is zero")
    return float(np.sqrt(np.mean((v - r) ** 2)) / m)
