"""Reconstruction losses, mu-law HDR compression and image metrics.

All loss functions return gradients alongside values where the trainer needs
them; gradients are exact for the functions as defined here (with the mu-law
min/max bounds held constant).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ContractViolation

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 100.0


@dataclass(frozen=True)
class LossWeights:
    lambda_dssim: float = 0.2
    alpha_hdr: float = 0.6
    mu: float = 5000.0

    def __post_init__(self):
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ContractViolation("lambda must lie in [0, 1]")
        if self.alpha_hdr < 0.0:
            raise ContractViolation("alpha must be non-negative")
        if not self.mu > 0.0:
            raise ContractViolation("mu must be positive")


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def l1(img1, img2) -> float:
    a, b = _check_pair(img1, img2)
    return float(np.mean(np.abs(a - b)))


def l1_grad(img1, img2) -> np.ndarray:
    a, b = _check_pair(img1, img2)
    return np.sign(a - b) / a.size


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


@lru_cache(maxsize=32)
def _blur_matrix(n: int) -> np.ndarray:
    # 'same'-size Gaussian correlation with mirror padding, as an explicit n x n operator
    return correlate1d(np.eye(n), gaussian_window(), axis=0, mode="reflect")


def _blur(x, transpose=False):
    bh, bw = _blur_matrix(x.shape[0]), _blur_matrix(x.shape[1])
    if transpose:
        bh, bw = bh.T, bw.T
    h, w = x.shape[:2]
    rows = (bh @ x.reshape(h, -1)).reshape(x.shape)
    return np.matmul(bw, rows)


def _ssim_terms(a, b, data_range):
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) <= SSIM_WINDOW // 2:
        raise ContractViolation(f"image {a.shape[:2]} too small for the {SSIM_WINDOW}px SSIM window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu1, mu2 = _blur(a), _blur(b)
    e11, e22, e12 = _blur(a * a), _blur(b * b), _blur(a * b)
    s11 = e11 - mu1 * mu1
    s22 = e22 - mu2 * mu2
    s12 = e12 - mu1 * mu2
    num1 = 2.0 * mu1 * mu2 + c1
    num2 = 2.0 * s12 + c2
    den1 = mu1 * mu1 + mu2 * mu2 + c1
    den2 = s11 + s22 + c2
    smap = num1 * num2 / (den1 * den2)
    return a, b, mu1, mu2, num1, num2, den1, den2, smap


def ssim(img1, img2, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), per channel then averaged."""
    a, b = _check_pair(img1, img2)
    return float(np.mean(_ssim_terms(a, b, data_range)[-1]))


def dssim(img1, img2, data_range: float = 1.0) -> float:
    return (1.0 - ssim(img1, img2, data_range)) / 2.0


def ssim_grad(img1, img2, data_range: float = 1.0) -> np.ndarray:
    """d ssim / d img1."""
    a0, b0 = _check_pair(img1, img2)
    a, b, mu1, mu2, num1, num2, den1, den2, smap = _ssim_terms(a0, b0, data_range)
    n = smap.size
    d_mu1 = 2.0 * mu2 * (num2 - num1) / (den1 * den2) - 2.0 * mu1 * smap * (1.0 / den1 - 1.0 / den2)
    d_e11 = -smap / den2
    d_e12 = 2.0 * num1 / (den1 * den2)
    g = _blur(d_mu1, True) + 2.0 * a * _blur(d_e11, True) + b * _blur(d_e12, True)
    return (g / n).reshape(a0.shape)


def mu_law(image, mu: float = 5000.0, bounds=None) -> np.ndarray:
    """log(1 + mu * norm(I)) / log(1 + mu) with per-image min-max normalization.

    ``bounds`` overrides the (min, max) pair; a degenerate range maps to zeros.
    """
    x = np.asarray(image, dtype=np.float64)
    lo, hi = (float(x.min()), float(x.max())) if bounds is None else bounds
    span = hi - lo
    if span < 1e-12:
        return np.zeros_like(x)
    return np.log1p(mu * (x - lo) / span) / np.log1p(mu)


def mu_law_grad(image, mu: float = 5000.0, bounds=None) -> np.ndarray:
    """Elementwise derivative of :func:`mu_law` with the bounds held constant."""
    x = np.asarray(image, dtype=np.float64)
    lo, hi = (float(x.min()), float(x.max())) if bounds is None else bounds
    span = hi - lo
    if span < 1e-12:
        return np.zeros_like(x)
    return mu / ((1.0 + mu * (x - lo) / span) * np.log1p(mu) * span)


def recon_loss(img1, img2, lam: float = 0.2) -> float:
    a, b = _check_pair(img1, img2)
    value = (1.0 - lam) * l1(a, b)
    if lam > 0.0:
        value += lam * dssim(a, b)
    return float(value)


def recon_loss_grad(img1, img2, lam: float = 0.2) -> tuple[float, np.ndarray]:
    """Value of :func:`recon_loss` and its gradient w.r.t. ``img1``."""
    a, b = _check_pair(img1, img2)
    value = (1.0 - lam) * l1(a, b)
    grad = (1.0 - lam) * l1_grad(a, b)
    if lam > 0.0:
        value += lam * dssim(a, b)
        grad = grad - 0.5 * lam * ssim_grad(a, b)
    return float(value), grad


@dataclass
class LossResult:
    total: float
    ldr: float
    hdr: float
    grad_ldr2d: np.ndarray | None
    grad_ldr3d: np.ndarray | None
    grad_hdr2d: np.ndarray | None


def total_loss(ldr2d, ldr3d, ldr_gt, hdr2d=None, hdr_gt=None, weights: LossWeights = LossWeights()) -> LossResult:
    """L_ldr + alpha * L_hdr with gradient images for every rendered input.

    ``ldr2d`` may be None when pixel-level supervision is off.  The HDR pair must be
    both present or both absent; without HDR ground truth alpha is forced to zero.
    """
    if (hdr2d is None) != (hdr_gt is None):
        raise ContractViolation("HDR render and HDR ground truth must be given together")
    lam = weights.lambda_dssim
    ldr = 0.0
    g2d = g3d = gh = None
    if ldr2d is not None:
        v, g2d = recon_loss_grad(ldr2d, ldr_gt, lam)
        ldr += v
    if ldr3d is not None:
        v, g3d = recon_loss_grad(ldr3d, ldr_gt, lam)
        ldr += v
    hdr = 0.0
    alpha = weights.alpha_hdr if hdr_gt is not None else 0.0
    if alpha > 0.0:
        pred_bounds = (float(np.min(hdr2d)), float(np.max(hdr2d)))
        pred = mu_law(hdr2d, weights.mu, pred_bounds)
        target = mu_law(hdr_gt, weights.mu)
        hdr, g_mu = recon_loss_grad(pred, target, lam)
        gh = alpha * g_mu * mu_law_grad(hdr2d, weights.mu, pred_bounds)
    return LossResult(ldr + alpha * hdr, ldr, hdr, g2d, g3d, gh)


def psnr(img1, img2, peak: float = 1.0) -> float:
    """PSNR in dB; identical images give +inf (see :func:`capped`)."""
    a, b = _check_pair(img1, img2)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak**2 / mse))


def capped(value: float, cap: float = PSNR_CAP) -> float:
    return min(value, cap)
