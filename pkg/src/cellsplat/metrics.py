"""Image quality metrics: PSNR, SSIM, and the D-SSIM training term.

SSIM uses the reference 11x11 Gaussian window (sigma 1.5) with
C1 = 0.01^2, C2 = 0.03^2 and is evaluated on full windows only (the window
shrinks per axis for images smaller than 11 pixels). The gradient variant
feeds the color loss during training.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP_DB = 100.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for [0,1] images; identical images cap at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_kernel(size: int, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, kr: np.ndarray, kc: np.ndarray) -> np.ndarray:
    out = convolve2d(img, kr[None, :], mode="valid")
    return convolve2d(out, kc[:, None], mode="valid")


def _filter_adjoint(grad: np.ndarray, kr: np.ndarray, kc: np.ndarray) -> np.ndarray:
    # Adjoint of valid correlation with a symmetric kernel is full convolution.
    out = convolve2d(grad, kr[None, :], mode="full")
    return convolve2d(out, kc[:, None], mode="full")


def _as_channels(img: np.ndarray):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return [img]
    return [img[:, :, c] for c in range(img.shape[2])]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return _ssim_impl(a, b, want_grad=False)[0]


def d_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural dissimilarity (1 - SSIM) / 2 in [0, 1]."""
    return (1.0 - ssim(a, b)) / 2.0


def d_ssim_with_grad(a: np.ndarray, b: np.ndarray):
    """D-SSIM value and its gradient with respect to the first image."""
    value, grad = _ssim_impl(a, b, want_grad=True)
    return (1.0 - value) / 2.0, -0.5 * grad


def _ssim_impl(a: np.ndarray, b: np.ndarray, want_grad: bool):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    h, w = a.shape[:2]
    kc = _gaussian_kernel(min(11, h))
    kr = _gaussian_kernel(min(11, w))
    chans_a = _as_channels(a)
    chans_b = _as_channels(b)

    total = 0.0
    grads = []
    for ca, cb in zip(chans_a, chans_b):
        mu_a = _filter_valid(ca, kr, kc)
        mu_b = _filter_valid(cb, kr, kc)
        e_aa = _filter_valid(ca * ca, kr, kc)
        e_bb = _filter_valid(cb * cb, kr, kc)
        e_ab = _filter_valid(ca * cb, kr, kc)
        var_a = e_aa - mu_a * mu_a
        var_b = e_bb - mu_b * mu_b
        cov = e_ab - mu_a * mu_b

        a1 = 2 * mu_a * mu_b + SSIM_C1
        a2 = 2 * cov + SSIM_C2
        b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
        b2 = var_a + var_b + SSIM_C2
        s = (a1 * a2) / (b1 * b2)
        total += float(np.mean(s))

        if want_grad:
            npix = s.size
            ds_da1 = a2 / (b1 * b2)
            ds_da2 = a1 / (b1 * b2)
            ds_db1 = -s / b1
            ds_db2 = -s / b2
            # s depends on mu_a directly and through cov and var_a.
            d_mu = ds_da1 * 2 * mu_b + ds_da2 * (-2 * mu_b) + ds_db1 * 2 * mu_a + ds_db2 * (-2 * mu_a)
            d_eaa = ds_db2
            d_eab = ds_da2 * 2
            g = _filter_adjoint(d_mu, kr, kc)
            g += 2 * ca * _filter_adjoint(d_eaa, kr, kc)
            g += cb * _filter_adjoint(d_eab, kr, kc)
            grads.append(g / npix)

    n_chan = len(chans_a)
    value = total / n_chan
    if not want_grad:
        return value, None
    grad = np.stack(grads, axis=-1) / n_chan
    if a.ndim == 2:
        grad = grad[:, :, 0]
    return value, grad
