"""Minimal PNG decoder: 8-bit gray/RGB/RGBA, filters 0-4, no interlacing.

Returns an (H, W, 3) uint8 array; gray is replicated, alpha is dropped.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

SIGNATURE = b"\x89PNG\r\n\x1a\n"
_CHANNELS = {0: 1, 2: 3, 6: 4}


class PngError(ValueError):
    pass


def _paeth(a, b, c):
    p = a.astype(np.int32) + b.astype(np.int32) - c.astype(np.int32)
    pa = np.abs(p - a)
    pb = np.abs(p - b)
    pc = np.abs(p - c)
    out = np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))
    return out.astype(np.uint8)


def decode(data):
    if data[:8] != SIGNATURE:
        raise PngError("bad PNG signature")
    pos = 8
    width = height = None
    color_type = bit_depth = None
    idat = []
    while pos < len(data):
        if pos + 8 > len(data):
            raise PngError("truncated chunk header")
        (length,) = struct.unpack_from(">I", data, pos)
        tag = data[pos + 4 : pos + 8]
        body = data[pos + 8 : pos + 8 + length]
        if len(body) != length:
            raise PngError(f"truncated {tag!r} chunk")
        pos += 12 + length  # skip CRC
        if tag == b"IHDR":
            width, height, bit_depth, color_type, _, _, interlace = struct.unpack(
                ">IIBBBBB", body
            )
            if bit_depth != 8:
                raise PngError(f"unsupported bit depth {bit_depth}")
            if color_type not in _CHANNELS:
                raise PngError(f"unsupported color type {color_type}")
            if interlace:
                raise PngError("interlaced PNG not supported")
        elif tag == b"IDAT":
            idat.append(body)
        elif tag == b"IEND":
            break
    if width is None or not idat:
        raise PngError("missing IHDR or IDAT")
    channels = _CHANNELS[color_type]
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as e:
        raise PngError(f"bad IDAT stream: {e}") from None
    stride = width * channels
    if len(raw) != height * (stride + 1):
        raise PngError(f"decompressed size {len(raw)} != expected {height * (stride + 1)}")

    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for r in range(height):
        ftype = raw[r * (stride + 1)]
        row = np.frombuffer(raw[r * (stride + 1) + 1 : (r + 1) * (stride + 1)], dtype=np.uint8).copy()
        if ftype == 0:
            pass
        elif ftype == 1:  # Sub
            for i in range(channels, stride):
                row[i] = (int(row[i]) + int(row[i - channels])) & 0xFF
        elif ftype == 2:  # Up
            row = (row.astype(np.int32) + prev).astype(np.uint8)
        elif ftype == 3:  # Average
            for i in range(stride):
                left = int(row[i - channels]) if i >= channels else 0
                row[i] = (int(row[i]) + (left + int(prev[i])) // 2) & 0xFF
        elif ftype == 4:  # Paeth
            for i in range(stride):
                left = row[i - channels] if i >= channels else np.uint8(0)
                ul = prev[i - channels] if i >= channels else np.uint8(0)
                row[i] = (int(row[i]) + int(_paeth(np.uint8(left), prev[i], np.uint8(ul)))) & 0xFF
        else:
            raise PngError(f"unknown filter type {ftype} in row {r}")
        out[r] = row
        prev = out[r]
    img = out.reshape(height, width, channels)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    elif channels == 4:
        img = img[:, :, :3]
    return img
