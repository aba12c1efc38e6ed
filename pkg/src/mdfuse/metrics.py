"""Fusion-quality metrics: PSNR, SSIM, mutual information, Nabf.

Conventions (documented here because the literature varies):
  - fusion SSIM and fusion MI are the sums of the two single-source scores,
    so fusion_ssim(f, f, f) = 2 and values above 1 are expected;
  - MI uses 64 histogram bins over [0,1] and base-2 logs (bits);
  - Nabf is a Petrovic/Xydeas-style artifact measure: Sobel edge strength and
    orientation similarities Q are computed fused-vs-each-source with the
    standard constants (Gamma_g=0.9994, kappa_g=-15, sigma_g=0.5,
    Gamma_a=0.9879, kappa_a=-22, sigma_a=0.8); artifact sites are pixels whose
    fused edge strength exceeds both sources; their mass g_f*(1 - max(Q_vi,
    Q_ir)) is normalized by the total edge energy sum(max(g_f, g_vi, g_ir)).
    Weighting artifact sites by fused (not source) edge energy keeps the
    measure defined on edge-free sources.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imageio import ImageBuffer
from .tensor import ShapeError

PSNR_CAP_DB = 99.0

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _as_array(img):
    if isinstance(img, ImageBuffer):
        return img.pixels
    return np.asarray(img, dtype=np.float64)


def _as_gray(img):
    if isinstance(img, ImageBuffer):
        return img.gray()
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[2] == 1:
            return arr[:, :, 0]
        return 0.299 * arr[:, :, 0] + 0.587 * arr[:, :, 1] + 0.114 * arr[:, :, 2]
    return arr


def psnr(fused, reference, peak=1.0):
    """10*log10(peak^2 / MSE), capped at 99 dB for identical images."""
    a, b = _as_array(fused), _as_array(reference)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a_gray, b_gray, window=11, sigma=1.5, k1=0.01, k2=0.03, peak=1.0):
    """Mean local SSIM over valid (full-window) positions."""
    a, b = _as_gray(a_gray), _as_gray(b_gray)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ShapeError(f"ssim: image {a.shape} smaller than window {window}")
    w = _gaussian_window(window, sigma)
    half = window // 2

    def filt(x):
        return ndimage.convolve(x, w, mode="constant")[half:-half, half:-half]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def fusion_ssim(fused, vi, ir):
    """Two-source sum: ssim(f, vi) + ssim(f, ir) on luminance planes."""
    f = _as_gray(fused)
    return ssim(f, _as_gray(vi)) + ssim(f, _as_gray(ir))


def _hist_probs(a, b, bins):
    ia = np.clip((a * bins).astype(np.int64), 0, bins - 1).ravel()
    ib = np.clip((b * bins).astype(np.int64), 0, bins - 1).ravel()
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).astype(np.float64)
    joint /= joint.sum()
    return joint.reshape(bins, bins)


def mi(a_gray, b_gray, bins=64):
    """Histogram mutual information in bits; mi(a, a) equals H(a)."""
    a, b = _as_gray(a_gray), _as_gray(b_gray)
    if a.shape != b.shape:
        raise ShapeError(f"mi: shapes {a.shape} vs {b.shape}")
    joint = _hist_probs(a, b, bins)
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    ratio = joint[mask] / (pa @ pb)[mask]
    return float((joint[mask] * np.log2(ratio)).sum())


def entropy_bits(a_gray, bins=64):
    """Histogram entropy in bits (the mi(a, a) identity value)."""
    a = _as_gray(a_gray)
    p = _hist_probs(a, a, bins).sum(axis=1)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def fusion_mi(fused, vi, ir, bins=64):
    f = _as_gray(fused)
    return mi(f, _as_gray(vi), bins) + mi(f, _as_gray(ir), bins)


def _sobel_strength_orientation(gray):
    gp = np.pad(gray, 1, mode="reflect")
    gx = ndimage.convolve(gp, _SOBEL_X, mode="constant")[1:-1, 1:-1]
    gy = ndimage.convolve(gp, _SOBEL_Y, mode="constant")[1:-1, 1:-1]
    strength = np.sqrt(gx * gx + gy * gy)
    alpha = np.arctan2(gy, gx)
    alpha = np.where(alpha > np.pi / 2, alpha - np.pi, alpha)
    alpha = np.where(alpha <= -np.pi / 2, alpha + np.pi, alpha)
    return strength, alpha


def _edge_preservation(g_src, a_src, g_f, a_f):
    big = np.maximum(g_src, g_f)
    small = np.minimum(g_src, g_f)
    ratio = np.where(big > 0, small / np.where(big > 0, big, 1.0), 1.0)
    diff = np.abs(a_src - a_f)
    diff = np.minimum(diff, np.pi - diff)
    asim = np.where(big > 0, 1.0 - diff / (np.pi / 2.0), 1.0)
    qg = 0.9994 / (1.0 + np.exp(-15.0 * (ratio - 0.5)))
    qa = 0.9879 / (1.0 + np.exp(-22.0 * (asim - 0.8)))
    return qg * qa


def nabf(fused, vi, ir):
    """Edge-artifact mass: fused-only edge energy weighted by (1 - Q), in [0,1]."""
    f, a, b = _as_gray(fused), _as_gray(vi), _as_gray(ir)
    if f.shape != a.shape or f.shape != b.shape:
        raise ShapeError(f"nabf: shapes {f.shape}/{a.shape}/{b.shape}")
    g_f, al_f = _sobel_strength_orientation(f)
    g_a, al_a = _sobel_strength_orientation(a)
    g_b, al_b = _sobel_strength_orientation(b)
    q_a = _edge_preservation(g_a, al_a, g_f, al_f)
    q_b = _edge_preservation(g_b, al_b, g_f, al_f)
    artifact = (g_f > g_a) & (g_f > g_b)
    mass = (g_f * (1.0 - np.maximum(q_a, q_b)) * artifact).sum()
    total = np.maximum(g_f, np.maximum(g_a, g_b)).sum()
    if total == 0.0:
        return 0.0
    return float(np.clip(mass / total, 0.0, 1.0))


@dataclass
class MetricReport:
    psnr: float
    ssim: float  # two-source sum
    nabf: float
    mi: float  # two-source sum, bits
    ssim_vi: float = 0.0
    ssim_ir: float = 0.0


def evaluate_fusion(fused, vi, ir, reference):
    """All four headline metrics for one image.

    psnr is measured against `reference` (the clean visible ground truth);
    ssim/mi/nabf against the two source planes.
    """
    s_vi = ssim(_as_gray(fused), _as_gray(vi))
    s_ir = ssim(_as_gray(fused), _as_gray(ir))
    return MetricReport(
        psnr=psnr(fused, reference),
        ssim=s_vi + s_ir,
        nabf=nabf(fused, vi, ir),
        mi=fusion_mi(fused, vi, ir),
        ssim_vi=s_vi,
        ssim_ir=s_ir,
    )
