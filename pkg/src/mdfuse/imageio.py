"""Bit-exact persistence: PPM/PGM images, raw tensor files, checkpoints.

Formats:
  images     PPM (P6) for 3-channel, PGM (P5) for 1-channel, maxval 255
  tensors    magic "MDAT", version u32, rank u32, dims u32[], payload f32 LE
  checkpoint directory with manifest.json + params.bin; the manifest carries
             config/step/seed/rng state and a named tensor index (shape,
             offset, dtype); the blob is the concatenated little-endian data
             in sorted-name order, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ShapeError

MAGIC = b"MDAT"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed or unsupported file content."""


@dataclass
class ImageBuffer:
    """Pixels in [0,1], row-major, channel-interleaved; shape (H, W, C)."""

    width: int
    height: int
    channels: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(
            self.height, self.width, self.channels
        )

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        if c not in (1, 3):
            raise FormatError(f"ImageBuffer supports 1 or 3 channels, got {c}")
        return cls(width=w, height=h, channels=c, pixels=arr)

    def gray(self):
        """BT.601 luminance plane (H, W)."""
        if self.channels == 1:
            return self.pixels[:, :, 0]
        p = self.pixels
        return 0.299 * p[:, :, 0] + 0.587 * p[:, :, 1] + 0.114 * p[:, :, 2]


def _read_header_token(buf, pos):
    # skip whitespace and '#' comments
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("truncated image header")
    return buf[start:pos], pos


def read_image(path):
    """Read a P6 (3-channel) or P5 (1-channel) binary image, maxval 255."""
    buf = Path(path).read_bytes()
    magic, pos = _read_header_token(buf, 0)
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise FormatError(f"unsupported image magic {magic!r}")
    tok, pos = _read_header_token(buf, pos)
    try:
        width = int(tok)
        tok, pos = _read_header_token(buf, pos)
        height = int(tok)
        tok, pos = _read_header_token(buf, pos)
        maxval = int(tok)
    except ValueError as e:
        raise FormatError(f"malformed image header: {e}") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"bad image dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (need 255)")
    pos += 1  # single whitespace after maxval
    need = width * height * channels
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return ImageBuffer(width, height, channels, pixels.reshape(height, width, channels))


def write_image(img, path):
    """Write canonical P6/P5: header "P6\\n{w} {h}\\n255\\n" + raw payload."""
    p = img.pixels
    if p.min() < 0.0 or p.max() > 1.0:
        raise FormatError(f"pixels outside [0,1]: [{p.min()}, {p.max()}]")
    magic = b"P6" if img.channels == 3 else b"P5"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode()
    payload = np.rint(p * 255.0).astype(np.uint8).tobytes()
    Path(path).write_bytes(header + payload)


def save_tensor(arr, path):
    """Write "MDAT" v1: payload is f32 little-endian."""
    arr = np.asarray(arr, dtype=np.float32)
    dims = arr.shape
    header = MAGIC + struct.pack("<II", VERSION, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    Path(path).write_bytes(header + arr.astype("<f4").tobytes())


def load_tensor(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"bad tensor magic {buf[:4]!r}")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    n = int(np.prod(dims)) if dims else 1
    payload = buf[12 + 4 * rank :]
    if len(payload) != 4 * n:
        raise FormatError(f"size mismatch: dims {dims} need {4 * n} bytes, have {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def _dtype_tag(arr):
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise FormatError(f"unsupported checkpoint dtype {arr.dtype}")


def save_checkpoint(tensors, meta, path):
    """Write manifest.json + params.bin under directory `path`.

    tensors: name -> ndarray; meta: JSON-serializable dict stored verbatim.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        tag = _dtype_tag(arr)
        raw = arr.astype(_DTYPES[tag], copy=False).tobytes()
        index[name] = {"shape": list(arr.shape), "offset": offset, "dtype": tag}
        blobs.append(raw)
        offset += len(raw)
    manifest = dict(meta)
    manifest["tensors"] = index
    (path / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"
    )
    (path / "params.bin").write_bytes(b"".join(blobs))


def load_checkpoint(path):
    """Read a checkpoint directory; returns (meta, tensors)."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable checkpoint manifest: {e}") from None
    blob = (path / "params.bin").read_bytes()
    index = manifest.pop("tensors")
    tensors = {}
    for name, entry in index.items():
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        raw = blob[start : start + n * dt.itemsize]
        if len(raw) != n * dt.itemsize:
            raise FormatError(f"checkpoint blob truncated at tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return manifest, tensors


def assign_params(store, tensors, prefix=""):
    """Copy checkpoint arrays into a ParamStore's registered parameters.

    Raises on a missing name or a shape mismatch, naming the tensor.
    """
    for name, p in store.params.items():
        key = prefix + name
        if key not in tensors:
            raise KeyError(f"checkpoint is missing parameter {key!r}")
        arr = tensors[key]
        if tuple(arr.shape) != p.shape:
            raise ShapeError(
                f"checkpoint tensor {key!r} has shape {tuple(arr.shape)}, expected {p.shape}"
            )
        p.data = arr.astype(p.data.dtype, copy=True)
        p.grad = None
    for name, buf in store.buffers.items():
        key = "buffer:" + name
        if key not in tensors:
            raise KeyError(f"checkpoint is missing buffer {key!r}")
        arr = tensors[key]
        if tuple(arr.shape) != buf.shape:
            raise ShapeError(
                f"checkpoint buffer {key!r} has shape {tuple(arr.shape)}, expected {buf.shape}"
            )
        buf[...] = arr
