"""Deterministic descriptor-token construction for mock mode.

This mirrors the client-side mock token math exactly (same statistics, same
calibration constants, same noise stream derivation) so a client talking to a
mock-mode service gets the same priors it would compute in process. Keep the
two in lockstep when changing either.

Tokens (8 x 64): rows 0..3 are weather tokens, descriptor-weighted orthonormal
Hadamard directions plus N(0, 0.01) noise seeded from (service seed, image
bytes); rows 4..7 tile the scene statistics.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy import ndimage

C_ORG = 64
NOISE_SIGMA = 0.01
HAZE_CAL = (0.40, 0.20)
RAIN_CAL = (3.0e-4, 1.5e-3)
SNOW_CAL = (0.08, 0.50)

_H4 = np.array(
    [[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], dtype=np.float64
)


def luminance(pixels):
    if pixels.shape[-1] == 1:
        return pixels[:, :, 0]
    return 0.299 * pixels[:, :, 0] + 0.587 * pixels[:, :, 1] + 0.114 * pixels[:, :, 2]


def dark_channel_mean(pixels, patch=7):
    dark = pixels.min(axis=2)
    return float(ndimage.minimum_filter(dark, size=patch, mode="nearest").mean())


def rain_streak_energy(y):
    resid = y - ndimage.median_filter(y, size=3, mode="nearest")
    eh = float(np.mean((resid[:, 1:] - resid[:, :-1]) ** 2))
    ev = float(np.mean((resid[1:, :] - resid[:-1, :]) ** 2))
    return max(0.0, eh - ev)


def bright_compact_density(y, thresh=0.85, max_area_frac=0.01, max_aspect=2.5):
    mask = y > thresh
    labels, n = ndimage.label(mask)
    if n == 0:
        return 0.0
    h, w = y.shape
    max_area = max(9.0, max_area_frac * h * w)
    count = 0
    for i, sl in enumerate(ndimage.find_objects(labels)):
        if sl is None:
            continue
        area = int((labels[sl] == i + 1).sum())
        if area > max_area:
            continue
        bh = sl[0].stop - sl[0].start
        bw = sl[1].stop - sl[1].start
        if max(bh, bw) / max(1, min(bh, bw)) > max_aspect:
            continue
        count += 1
    return min(1.0, count * 256.0 / (h * w))


def _cal(value, floor, rng):
    return float(np.clip((value - floor) / rng, 0.0, 1.0))


def weather_descriptors(pixels):
    y = luminance(pixels)
    haze = _cal(dark_channel_mean(pixels), *HAZE_CAL)
    rain = _cal(rain_streak_energy(y), *RAIN_CAL)
    snow = _cal(bright_compact_density(y), *SNOW_CAL)
    none = float(np.clip(1.0 - haze - rain - snow, 0.0, 1.0))
    return np.array([haze, rain, snow, none])


def scene_stats(pixels):
    y = luminance(pixels)
    mean_y = float(y.mean())
    contrast = float(min(1.0, 2.0 * y.std()))
    edges = float(
        min(1.0, 4.0 * (np.abs(np.diff(y, axis=0)).mean() + np.abs(np.diff(y, axis=1)).mean()))
    )
    if pixels.shape[-1] == 3:
        balance = float(np.clip(0.5 + (pixels[:, :, 0].mean() - pixels[:, :, 2].mean()), 0.0, 1.0))
    else:
        balance = 0.5
    return np.array([mean_y, contrast, edges, balance])


def weather_basis(c_org=C_ORG):
    return np.repeat(_H4, c_org // 4, axis=1) / np.sqrt(c_org)


def _noise_rng(seed, pixels_u8):
    digest = hashlib.sha256(pixels_u8.tobytes()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng([seed & 0xFFFFFFFF] + words)


def mock_tokens(pixels_u8, seed=0, c_org=C_ORG):
    """Token matrix for an (H, W, 3) uint8 image."""
    q = pixels_u8.astype(np.float64) / 255.0
    d = weather_descriptors(q)
    stats = scene_stats(q)
    basis = weather_basis(c_org)
    rng = _noise_rng(seed, pixels_u8)
    noise = rng.normal(0.0, NOISE_SIGMA, size=(4, c_org))
    weather = d[:, None] * basis + noise
    scene = np.broadcast_to(stats[:, None], (4, c_org)).copy()
    return np.concatenate([weather, scene], axis=0)
