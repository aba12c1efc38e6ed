"""Training objective: integration loss + color consistency loss.

The fused image is pulled toward the pixel-wise maximum of the clean visible
reference and the infrared image, in both intensity and Sobel gradient, on the
luminance plane; chroma (Cb/Cr) is pulled toward the clean visible image.
All reductions are means, all distances L1, color space BT.601 full-range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

# column maps: [R,G,B] @ col + offset. Cb/Cr fold the Y dependency in, so the
# whole conversion is one linear map per plane.
_Y_COL = np.array([0.299, 0.587, 0.114])
_CB_COL = 0.564 * (np.array([0.0, 0.0, 1.0]) - _Y_COL)
_CR_COL = 0.713 * (np.array([1.0, 0.0, 0.0]) - _Y_COL)

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _plane(img, col, offset=0.0):
    h, w, c = img.shape
    flat = T.reshape(img, (h * w, c))
    out = T.matmul(flat, Tensor(col.reshape(3, 1)))
    out = T.reshape(out, (h, w))
    return T.add(out, offset) if offset else out


def rgb_to_ycbcr(img):
    """BT.601 full-range conversion of img[H,W,3] in [0,1] -> (Y, Cb, Cr)."""
    if img.shape[-1] != 3:
        raise ShapeError(f"rgb_to_ycbcr needs 3 channels, got {img.shape}")
    return (
        _plane(img, _Y_COL),
        _plane(img, _CB_COL, 0.5),
        _plane(img, _CR_COL, 0.5),
    )


def luminance_t(img):
    """Y plane of a [H,W,3] or [H,W,1] tensor."""
    if img.shape[-1] == 1:
        return T.reshape(img, img.shape[:2])
    return _plane(img, _Y_COL)


def image_gradient(gray):
    """Sobel magnitude |G_x| + |G_y| with reflect padding, on gray[H,W]."""
    h, w = gray.shape
    x = T.reshape(gray, (1, 1, h, w))
    xp = T.pad_reflect(x, 1)
    gx = T.conv2d(xp, Tensor(_SOBEL_X.reshape(1, 1, 3, 3)), stride=1, pad=0)
    gy = T.conv2d(xp, Tensor(_SOBEL_Y.reshape(1, 1, 3, 3)), stride=1, pad=0)
    mag = T.add(T.absolute(gx), T.absolute(gy))
    return T.reshape(mag, (h, w))


def _mean_l1(a, b):
    return T.reduce_mean(T.absolute(T.sub(a, b)))


def l_inte(i_f, vi_clean, ir):
    """Integration loss on luminance: intensity and gradient L1 to the maxima."""
    if i_f.shape != vi_clean.shape:
        raise ShapeError(f"fused {i_f.shape} vs clean visible {vi_clean.shape}")
    if ir.shape[:2] != i_f.shape[:2]:
        raise ShapeError(f"infrared {ir.shape} does not match {i_f.shape}")
    y_f = luminance_t(i_f)
    y_vi = luminance_t(vi_clean)
    y_ir = luminance_t(ir)
    target = T.maximum(y_vi, y_ir)
    grad_target = T.maximum(image_gradient(y_vi), image_gradient(y_ir))
    return T.add(_mean_l1(image_gradient(y_f), grad_target), _mean_l1(y_f, target))


def l_color(i_f, vi_clean):
    """Chroma consistency: mean L1 over the Cb and Cr planes."""
    if i_f.shape != vi_clean.shape:
        raise ShapeError(f"fused {i_f.shape} vs clean visible {vi_clean.shape}")
    _, cb_f, cr_f = rgb_to_ycbcr(i_f)
    _, cb_v, cr_v = rgb_to_ycbcr(vi_clean)
    return T.add(_mean_l1(cb_f, cb_v), _mean_l1(cr_f, cr_v))


@dataclass
class LossBreakdown:
    l_inte: float
    l_color: float
    l_fusion: float


def fusion_loss(i_f, vi_clean, ir):
    """Returns (total Tensor, LossBreakdown of floats)."""
    inte = l_inte(i_f, vi_clean, ir)
    color = l_color(i_f, vi_clean)
    total = T.add(inte, color)
    return total, LossBreakdown(
        l_inte=float(inte.data), l_color=float(color.data), l_fusion=float(total.data)
    )
