"""Weather degradation synthesis: haze, rain, snow on clean visible images.

Haze follows the atmospheric scattering model I = J*t + A*(1-t) with
transmission t = exp(-beta * depth). Rain is seeded impulse noise convolved
with a normalized line kernel, screen-blended. Snow is seeded anti-aliased
bright disks composited by max, then a global veil. Everything is a pure
function of its seed; outputs stay in [0,1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imageio import ImageBuffer, read_image, write_image
from .tensor import ShapeError

DEGRADATIONS = ("haze", "rain", "snow")

# pixels clipped into [0,1] by the most recent call of each synth, for audit
clamp_counts = {"haze": 0, "rain": 0, "snow": 0}


def _clamped(kind, out):
    clamp_counts[kind] = int(((out < 0.0) | (out > 1.0)).sum())
    return np.clip(out, 0.0, 1.0)


@dataclass
class HazeParams:
    beta: float  # scattering coefficient per unit depth, >= 0
    airlight: tuple = (0.8, 0.8, 0.8)
    depth_mode: str = "ramp"  # ramp | radial | file:<path>

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not all(0.0 <= a <= 1.0 for a in self.airlight):
            raise ValueError(f"airlight outside [0,1]: {self.airlight}")


@dataclass
class RainParams:
    density: float = 0.06
    streak_length: int = 9
    angle_deg: float = 90.0
    intensity: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.density <= 1.0 or not 0.0 <= self.intensity <= 1.0:
            raise ValueError("rain density and intensity must lie in [0,1]")


@dataclass
class SnowParams:
    flakes_per_mpx: float = 2500.0
    radius_range: tuple = (1.0, 2.5)
    veil_strength: float = 0.25
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.radius_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad radius range {self.radius_range}")
        if not 0.0 <= self.veil_strength < 1.0:
            raise ValueError("veil_strength must lie in [0,1)")


def procedural_depth(h, w, mode="ramp"):
    """Depth map in [0,1]: ramp (top far=1, bottom near=0) or radial (center 0)."""
    if h <= 0 or w <= 0:
        raise ShapeError(f"bad depth size {h}x{w}")
    if mode == "ramp":
        col = 1.0 - np.arange(h) / max(h - 1, 1)
        return np.broadcast_to(col[:, None], (h, w)).copy()
    if mode == "radial":
        yy = np.arange(h)[:, None] - (h - 1) / 2.0
        xx = np.arange(w)[None, :] - (w - 1) / 2.0
        dist = np.sqrt(yy * yy + xx * xx)
        return dist / dist.max() if dist.max() > 0 else dist
    if mode.startswith("file:"):
        img = read_image(mode[5:])
        if img.channels != 1 or (img.height, img.width) != (h, w):
            raise ShapeError(
                f"depth file is {img.height}x{img.width}x{img.channels}, need {h}x{w}x1"
            )
        return img.pixels[:, :, 0]
    raise ValueError(f"unknown depth mode {mode!r}")


def synth_haze(clean, depth, p):
    """Atmospheric scattering blend; beta=0 leaves the image untouched."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (clean.height, clean.width):
        raise ShapeError(f"depth {depth.shape} does not match image {clean.height}x{clean.width}")
    t = np.exp(-p.beta * depth)[:, :, None]
    airlight = np.asarray(p.airlight, dtype=np.float64)[: clean.channels]
    out = clean.pixels * t + airlight * (1.0 - t)
    return ImageBuffer.from_array(_clamped("haze", out))


def rain_kernel(length, angle_deg):
    """Discrete line kernel of `length` samples at `angle_deg`, summing to 1."""
    half = (length - 1) / 2.0
    rad = np.deg2rad(angle_deg)
    size = length + (length % 2 == 0)  # odd grid so the center is a pixel
    k = np.zeros((size, size))
    c = size // 2
    for i in range(length):
        off = i - half
        r = c + int(np.rint(off * np.sin(rad)))
        q = c + int(np.rint(off * np.cos(rad)))
        k[r, q] += 1.0
    return k / k.sum()


def synth_rain(clean, p):
    """Seeded impulse noise -> line-kernel streaks -> screen blend."""
    h, w = clean.height, clean.width
    rng = np.random.default_rng(p.seed)
    mask = (rng.random((h, w)) < p.density).astype(np.float64)
    kernel = rain_kernel(p.streak_length, p.angle_deg)
    streak = ndimage.convolve(mask, kernel, mode="constant", cval=0.0)
    streak = np.clip(streak * p.intensity, 0.0, 1.0)[:, :, None]
    # screen blend written as J + s*(1-J): exact identity when the layer is 0
    out = clean.pixels + streak * (1.0 - clean.pixels)
    return ImageBuffer.from_array(_clamped("rain", out))


def synth_snow(clean, p):
    """Seeded anti-aliased bright disks composited by max, then a global veil."""
    h, w = clean.height, clean.width
    rng = np.random.default_rng(p.seed)
    count = int(np.rint(p.flakes_per_mpx * h * w / 1e6))
    out = clean.pixels.copy()
    yy = np.arange(h)[:, None]
    xx = np.arange(w)[None, :]
    for _ in range(count):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        radius = rng.uniform(*p.radius_range)
        brightness = rng.uniform(0.85, 1.0)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        cover = np.clip(radius - dist + 0.5, 0.0, 1.0)  # anti-aliased edge
        out = np.maximum(out, (brightness * cover)[:, :, None])
    v = p.veil_strength
    out = out * (1.0 - v) + v
    return ImageBuffer.from_array(_clamped("snow", out))


# severity presets: parameter ranges sampled per image
SEVERITY = {
    "light": {
        "haze_beta": (0.5, 0.9), "airlight": (0.7, 0.8),
        "rain_density": (0.02, 0.05), "rain_intensity": (0.35, 0.5),
        "flakes_per_mpx": (1200, 2000), "veil": (0.1, 0.18),
    },
    "medium": {
        "haze_beta": (1.2, 2.0), "airlight": (0.78, 0.9),
        "rain_density": (0.05, 0.1), "rain_intensity": (0.5, 0.7),
        "flakes_per_mpx": (2000, 3500), "veil": (0.2, 0.3),
    },
    "heavy": {
        "haze_beta": (2.2, 3.5), "airlight": (0.82, 0.95),
        "rain_density": (0.12, 0.2), "rain_intensity": (0.65, 0.85),
        "flakes_per_mpx": (4000, 6000), "veil": (0.32, 0.45),
    },
}


def degrade_one(clean, kind, rng, severity="medium"):
    """Apply one degradation with parameters drawn from the severity preset."""
    s = SEVERITY[severity]
    if kind == "haze":
        a = rng.uniform(*s["airlight"])
        tint = rng.uniform(-0.02, 0.02, size=3)
        p = HazeParams(
            beta=rng.uniform(*s["haze_beta"]),
            airlight=tuple(np.clip(a + tint, 0.0, 1.0)),
            depth_mode="ramp" if rng.random() < 0.5 else "radial",
        )
        depth = procedural_depth(clean.height, clean.width, p.depth_mode)
        return synth_haze(clean, depth, p)
    if kind == "rain":
        p = RainParams(
            density=rng.uniform(*s["rain_density"]),
            streak_length=int(rng.integers(7, 13)),
            angle_deg=rng.uniform(70.0, 110.0),
            intensity=rng.uniform(*s["rain_intensity"]),
            seed=int(rng.integers(0, 2**31 - 1)),
        )
        return synth_rain(clean, p)
    if kind == "snow":
        p = SnowParams(
            flakes_per_mpx=rng.uniform(*s["flakes_per_mpx"]),
            radius_range=(1.0, rng.uniform(1.8, 3.0)),
            veil_strength=rng.uniform(*s["veil"]),
            seed=int(rng.integers(0, 2**31 - 1)),
        )
        return synth_snow(clean, p)
    raise ValueError(f"unknown degradation {kind!r}")


# ---------------------------------------------------------------------------
# toy clean scenes
# ---------------------------------------------------------------------------

def toy_pair(size=64, seed=0):
    """Clean visible/infrared pair: sky+ground, boxes, and thermally hot blobs.

    Visible luminance is kept mostly below ~0.8 so bright-flake statistics
    stay informative after degradation.
    """
    rng = np.random.default_rng(seed)
    h = w = size
    horizon = int(h * rng.uniform(0.35, 0.55))
    vi = np.zeros((h, w, 3))
    sky_top = np.array([0.55, 0.62, 0.72]) + rng.uniform(-0.08, 0.08, 3)
    sky_bot = sky_top * 0.8
    grad = np.linspace(0.0, 1.0, horizon)[:, None, None]
    vi[:horizon] = sky_top * (1 - grad) + sky_bot * grad
    ground = np.array([0.28, 0.26, 0.22]) + rng.uniform(-0.05, 0.05, 3)
    shade = 1.0 + 0.15 * np.linspace(0, 1, h - horizon)[:, None, None]
    vi[horizon:] = ground * shade

    ir = np.zeros((h, w))
    ir[:horizon] = 0.15  # cold sky
    ir[horizon:] = 0.35 + 0.1 * np.linspace(0, 1, h - horizon)[:, None]

    # buildings / boxes with correlated thermal response
    for _ in range(rng.integers(3, 7)):
        bw = int(rng.integers(max(3, w // 10), max(4, w // 3)))
        bh = int(rng.integers(max(4, h // 8), max(5, h // 2)))
        x0 = int(rng.integers(0, w - bw))
        y0 = int(rng.integers(max(0, horizon - bh), h - bh))
        color = rng.uniform(0.15, 0.65, 3)
        vi[y0 : y0 + bh, x0 : x0 + bw] = color
        ir[y0 : y0 + bh, x0 : x0 + bw] = rng.uniform(0.2, 0.5)

    # hot targets: bright in infrared, mid-tone in visible
    yy = np.arange(h)[:, None]
    xx = np.arange(w)[None, :]
    for _ in range(rng.integers(1, 4)):
        cy = rng.uniform(horizon, h - 2)
        cx = rng.uniform(2, w - 2)
        r = rng.uniform(2.0, 5.0)
        blob = np.clip(r - np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) + 0.5, 0, 1)
        ir = np.maximum(ir, blob * rng.uniform(0.85, 1.0))
        vi = np.maximum(vi, (blob * rng.uniform(0.4, 0.6))[:, :, None] * rng.uniform(0.8, 1.2, 3).clip(0, 1))

    vi = np.clip(vi, 0.0, 0.85)
    ir = np.clip(ir, 0.0, 1.0)
    return ImageBuffer.from_array(vi), ImageBuffer.from_array(ir)


# ---------------------------------------------------------------------------
# dataset synthesis
# ---------------------------------------------------------------------------

def synth_dataset(clean_pairs, out_dir, split_ratio=0.75, seed=0, severity="medium"):
    """Emit each clean pair under all three degradations (1:1:1), write files.

    Layout: {split}/{degradation}/{id}_vi.ppm, {id}_ir.pgm, {id}_clean.ppm,
    plus index.json. Deterministic per seed, byte-wise.
    """
    clean_pairs = list(clean_pairs)
    if not clean_pairs:
        raise ValueError("synth_dataset needs at least one clean pair")
    out = Path(out_dir)
    n = len(clean_pairs)
    split_rng = np.random.default_rng([seed, 9151])
    order = split_rng.permutation(n)
    n_train = int(np.rint(n * split_ratio))
    splits = {int(idx): ("train" if i < n_train else "test") for i, idx in enumerate(order)}

    records = []
    for i, (vi, ir) in enumerate(clean_pairs):
        pid = f"{i:04d}"
        split = splits[i]
        for kind in DEGRADATIONS:
            rng = np.random.default_rng([seed, 1, i, DEGRADATIONS.index(kind)])
            degraded = degrade_one(vi, kind, rng, severity)
            d = out / split / kind
            d.mkdir(parents=True, exist_ok=True)
            write_image(degraded, d / f"{pid}_vi.ppm")
            write_image(ir, d / f"{pid}_ir.pgm")
            write_image(vi, d / f"{pid}_clean.ppm")
            records.append(
                {
                    "id": pid,
                    "degradation": kind,
                    "split": split,
                    "vi": f"{split}/{kind}/{pid}_vi.ppm",
                    "ir": f"{split}/{kind}/{pid}_ir.pgm",
                    "clean": f"{split}/{kind}/{pid}_clean.ppm",
                }
            )
    index = {"seed": seed, "severity": severity, "split_ratio": split_ratio, "records": records}
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return index


def load_index(data_dir):
    path = Path(data_dir) / "index.json"
    return json.loads(path.read_text())


def load_record(data_dir, rec):
    base = Path(data_dir)
    return (
        read_image(base / rec["vi"]),
        read_image(base / rec["ir"]),
        read_image(base / rec["clean"]),
    )
