"""Degradation-aware semantic prior extraction.

A provider turns the degraded visible image into a raw token sequence
S_org[S, C_org]. The default mock provider computes hand-crafted weather
descriptors (dark-channel mean for haze, directional high-frequency energy
ratio for rain, bright-compact-component density for snow) plus scene
statistics, and emits 8 tokens: 4 descriptor-weighted orthogonal weather
tokens with seeded noise, 4 scene-statistic tokens. A service provider speaks
the HTTP wire protocol instead.

The raw tokens are then projected (MLP + layernorm) to the working width and
refined by a bare single-head self-attention, yielding the semantic prior that
drives channel modulation and expert routing.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
import urllib.error
import urllib.request
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T
from .layers import layer_norm, mlp
from .tensor import Tensor

DEFAULT_PROMPT = "Describe the weather condition and the scene in this image."
WEATHER_KINDS = ("haze", "rain", "snow", "none")
C_ORG = 64
TOKEN_COUNT = 8
NOISE_SIGMA = 0.01

# descriptor calibration: affine clip of the raw statistic into a [0,1] score
HAZE_CAL = (0.40, 0.20)  # (floor, range) over dark-channel mean
RAIN_CAL = (3.0e-4, 1.5e-3)  # over excess horizontal energy in the median residual
SNOW_CAL = (0.08, 0.50)  # over bright-compact-component density


class ProviderError(RuntimeError):
    """Provider failed to produce usable tokens."""


@dataclass
class RawPrior:
    tokens: np.ndarray  # [S, C_org]
    provider_id: str

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 2:
            raise ProviderError(f"prior needs >= 2 tokens, got shape {self.tokens.shape}")
        if not np.isfinite(self.tokens).all():
            raise ProviderError("prior tokens contain non-finite values")


@dataclass
class SemanticPrior:
    tokens: Tensor  # [S, C]


@dataclass
class PriorProviderConfig:
    kind: str = "mock"  # mock | service
    prompt: str = DEFAULT_PROMPT
    endpoint: str = ""
    timeout_s: float = 5.0
    retries: int = 2
    fallback_to_mock: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind == "service" and not self.endpoint:
            raise ValueError("service provider requires an endpoint")


# ---------------------------------------------------------------------------
# descriptor math (the service's mock mode duplicates these, same constants)
# ---------------------------------------------------------------------------

def quantize_u8(pixels):
    return np.rint(np.asarray(pixels, dtype=np.float64) * 255.0).astype(np.uint8)


def luminance(pixels):
    if pixels.shape[-1] == 1:
        return pixels[:, :, 0]
    return 0.299 * pixels[:, :, 0] + 0.587 * pixels[:, :, 1] + 0.114 * pixels[:, :, 2]


def dark_channel_mean(pixels, patch=7):
    """Mean of the per-pixel channel minimum, min-filtered over patch x patch."""
    dark = pixels.min(axis=2)
    return float(ndimage.minimum_filter(dark, size=patch, mode="nearest").mean())


def directional_energies(y):
    """(horizontal, vertical) finite-difference energies of a luminance plane."""
    eh = float(np.mean((y[:, 1:] - y[:, :-1]) ** 2))
    ev = float(np.mean((y[1:, :] - y[:-1, :]) ** 2))
    return eh, ev


def directional_energy_ratio(y):
    """Horizontal-difference energy over total; vertical streaks push this to 1."""
    eh, ev = directional_energies(y)
    return eh / (eh + ev + 1e-12)


def rain_streak_energy(y):
    """Excess horizontal difference energy in the 3x3-median residual.

    The median filter removes 1-px streaks but preserves step edges, so scene
    structure cancels and near-vertical streak texture remains.
    """
    resid = y - ndimage.median_filter(y, size=3, mode="nearest")
    eh, ev = directional_energies(resid)
    return max(0.0, eh - ev)


def bright_compact_density(y, thresh=0.85, max_area_frac=0.01, max_aspect=2.5):
    """Density of small, roughly-round components brighter than `thresh`.

    Components larger than max_area_frac of the image (sky, airlight) or with
    an elongated bounding box (rain streaks) do not count.
    """
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
    """Calibrated [haze, rain, snow, none] scores in [0,1]."""
    y = luminance(pixels)
    haze = _cal(dark_channel_mean(pixels), *HAZE_CAL)
    rain = _cal(rain_streak_energy(y), *RAIN_CAL)
    snow = _cal(bright_compact_density(y), *SNOW_CAL)
    none = float(np.clip(1.0 - haze - rain - snow, 0.0, 1.0))
    return np.array([haze, rain, snow, none])


def scene_stats(pixels):
    """[mean luminance, contrast, edge density, channel balance], each in [0,1]."""
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


_H4 = np.array(
    [[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], dtype=np.float64
)


def weather_basis(c_org=C_ORG):
    """Four fixed orthonormal token directions (repeated Hadamard rows)."""
    return np.repeat(_H4, c_org // 4, axis=1) / np.sqrt(c_org)


def _noise_rng(seed, pixels_u8):
    digest = hashlib.sha256(pixels_u8.tobytes()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng([seed & 0xFFFFFFFF] + words)


def mock_tokens(pixels, seed=0, c_org=C_ORG):
    """Deterministic 8 x c_org token matrix for an image in [0,1]^(H,W,C).

    Statistics are computed on the 8-bit quantized image so an identical image
    seen through the PNG wire format yields identical tokens.
    """
    q = quantize_u8(pixels).astype(np.float64) / 255.0
    if q.ndim == 2:
        q = q[:, :, None]
    d = weather_descriptors(q)
    stats = scene_stats(q)
    basis = weather_basis(c_org)
    rng = _noise_rng(seed, quantize_u8(pixels))
    noise = rng.normal(0.0, NOISE_SIGMA, size=(4, c_org))
    weather = d[:, None] * basis + noise
    scene = np.broadcast_to(stats[:, None], (4, c_org)).copy()
    return np.concatenate([weather, scene], axis=0)


class MockProvider:
    """Pure function of (image, seed); no model weights involved."""

    def __init__(self, seed=0, c_org=C_ORG):
        self.seed = seed
        self.c_org = c_org

    def extract(self, image, prompt=DEFAULT_PROMPT):
        tokens = mock_tokens(image.pixels, seed=self.seed, c_org=self.c_org)
        return RawPrior(tokens=tokens, provider_id="mock")


# ---------------------------------------------------------------------------
# service client
# ---------------------------------------------------------------------------

def encode_png(pixels_u8):
    """Minimal 8-bit RGB PNG (filter 0 rows, one IDAT)."""
    if pixels_u8.ndim == 2:
        pixels_u8 = np.repeat(pixels_u8[:, :, None], 3, axis=2)
    if pixels_u8.shape[2] == 1:
        pixels_u8 = np.repeat(pixels_u8, 3, axis=2)
    h, w = pixels_u8.shape[:2]

    def chunk(tag, data):
        return (
            struct.pack(">I", len(data))
            + tag
            + data
            + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)
        )

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    raw = b"".join(b"\x00" + pixels_u8[r].tobytes() for r in range(h))
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", zlib.compress(raw, 6))
        + chunk(b"IEND", b"")
    )


def _validate_response(payload):
    try:
        tokens = np.asarray(payload["tokens"], dtype=np.float64)
        model = str(payload["model"])
    except (KeyError, TypeError, ValueError) as e:
        raise ProviderError(f"malformed prior response: {e}") from None
    if tokens.ndim != 2 or tokens.shape[0] < 2:
        raise ProviderError(f"prior response has bad token shape {tokens.shape}")
    if not np.isfinite(tokens).all():
        raise ProviderError("prior response contains non-finite tokens")
    return tokens, model


class ServiceProvider:
    """HTTP client for the prior wire protocol, with bounded retries."""

    def __init__(self, endpoint, timeout_s=5.0, retries=2, seed=0, fallback=None):
        self.endpoint = endpoint.rstrip("/")
        self.timeout_s = timeout_s
        self.retries = retries
        self.seed = seed
        self.fallback = fallback  # optional MockProvider
        self.attempts_made = 0  # diagnostic for retry accounting

    def _post(self, body):
        req = urllib.request.Request(
            self.endpoint + "/prior",
            data=json.dumps(body).encode(),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
            return json.loads(resp.read().decode())

    def extract(self, image, prompt=DEFAULT_PROMPT):
        body = {
            "image_png_b64": base64.b64encode(encode_png(quantize_u8(image.pixels))).decode(),
            "prompt": prompt,
        }
        last_error = None
        self.attempts_made = 0
        for _ in range(1 + self.retries):
            self.attempts_made += 1
            try:
                payload = self._post(body)
                tokens, model = _validate_response(payload)
                return RawPrior(tokens=tokens, provider_id=f"service:{model}")
            except (urllib.error.URLError, TimeoutError, OSError, json.JSONDecodeError) as e:
                last_error = e
        if self.fallback is not None:
            return self.fallback.extract(image, prompt)
        raise ProviderError(f"prior service unreachable after {1 + self.retries} attempts: {last_error}")

    def health(self):
        try:
            with urllib.request.urlopen(self.endpoint + "/health", timeout=self.timeout_s) as resp:
                return json.loads(resp.read().decode()).get("status") == "ok"
        except (urllib.error.URLError, TimeoutError, OSError, json.JSONDecodeError):
            return False


def make_provider(cfg):
    if cfg.kind == "mock":
        return MockProvider(seed=cfg.seed)
    if cfg.kind == "service":
        fallback = MockProvider(seed=cfg.seed) if cfg.fallback_to_mock else None
        return ServiceProvider(
            cfg.endpoint, timeout_s=cfg.timeout_s, retries=cfg.retries, seed=cfg.seed,
            fallback=fallback,
        )
    raise ValueError(f"unknown provider kind {cfg.kind!r}")


def extract_prior(provider, image, prompt=DEFAULT_PROMPT):
    """Provider call with schema validation; raises ProviderError on failure."""
    return provider.extract(image, prompt)


# ---------------------------------------------------------------------------
# projection + refinement (trainable)
# ---------------------------------------------------------------------------

def project_prior(store, raw, width, name="dspe.proj"):
    """layernorm(MLP(S_org)) per token -> [S, width]."""
    tokens = raw.tokens if isinstance(raw, RawPrior) else raw
    x = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens))
    h = mlp(store, name, x, [x.shape[-1], width])
    return layer_norm(store, f"{name}.ln", h, width)


def refine_prior(store, embed, name="dspe.refine", residual=False):
    """Bare single-head self-attention over the S tokens (d_k = C).

    No bias, no output projection; optionally adds the input back when
    `residual` is set (default off).
    """
    c = embed.shape[-1]
    wq = store.get(f"{name}.wq", (c, c))
    wk = store.get(f"{name}.wk", (c, c))
    wv = store.get(f"{name}.wv", (c, c))
    q = T.matmul(embed, wq)
    k = T.matmul(embed, wk)
    v = T.matmul(embed, wv)
    att = T.softmax(T.mul(T.matmul(q, T.transpose(k, (1, 0))), 1.0 / np.sqrt(c)), axis=-1)
    out = T.matmul(att, v)
    if residual:
        out = T.add(out, embed)
    return SemanticPrior(tokens=out)
