"""Minimal reverse-mode automatic differentiation over dense numpy-backed tensors.

Design: eager define-by-run tape. Ops execute immediately on numpy arrays and,
when a Tape is active and an input requires grad, append a node holding the
backward rule. `backward(loss)` replays the nodes in exact reverse recording
order, accumulating into `.grad`.

Element width is session-wide (thread-local): float32 by default, float64 via
`precision("float64")`. Gradient checking requires 64-bit mode.

Tensors are immutable once an op has produced them, except for `.grad`
accumulation. A Tape is confined to one thread.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op's contract."""


class DegenerateBatchError(ValueError):
    """Raised by train-mode batchnorm when a channel has a single element."""


_state = threading.local()


def _dtype():
    return getattr(_state, "dtype", np.float32)


class precision:
    """Context manager selecting the element width: "float32" or "float64"."""

    def __init__(self, dtype):
        self._new = np.dtype(dtype).type
        if self._new not in (np.float32, np.float64):
            raise ValueError(f"unsupported element width: {dtype}")

    def __enter__(self):
        self._old = _dtype()
        _state.dtype = self._new
        return self

    def __exit__(self, *exc):
        _state.dtype = self._old
        return False


class Tensor:
    """Dense n-dimensional array with optional gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_dtype())
        self.requires_grad = requires_grad
        self.grad = None

    @classmethod
    def _wrap(cls, arr, requires_grad):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # sugar; scalars allowed on either side
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered record of op nodes; backward visits them in reverse order."""

    def __init__(self):
        self.nodes = []  # (out, inputs, rule); rule(g) -> grads aligned with inputs

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _make(arr, inputs, rule):
    """Wrap an op result; record on the active tape when a grad is needed."""
    req = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, req)
    tape = _active_tape()
    if req and tape is not None:
        tape.nodes.append((out, inputs, rule))
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# matmul / conv
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product of a[M,K] @ b[K,N]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    arr = a.data @ b.data

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _make(arr, (a, b), rule)


def _im2col(xp, kh, kw, stride, ho, wo):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def conv2d(x, kernel, stride=1, pad=0):
    """Cross-correlation of x[B,C,H,W] with kernel[O,C,k,k], zero padding."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d operands, got {x.shape} and {kernel.shape}")
    bsz, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c or kh != kw:
        raise ShapeError(f"conv2d: kernel {kernel.shape} does not match input {x.shape}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(
            f"conv2d: no valid output for input {x.shape}, k={kh}, stride={stride}, pad={pad}"
        )
    # floor semantics: trailing rows/cols that do not fit a window are dropped
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)  # B,(C*k*k),(ho*wo)
    kflat = kernel.data.reshape(o, c * kh * kw)
    arr = np.matmul(kflat[None], cols).reshape(bsz, o, ho, wo)

    def rule(g):
        gf = g.reshape(bsz, o, ho * wo)
        dk = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        dcols = np.matmul(kflat.T[None], gf)
        dcols = dcols.reshape(bsz, c, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
        dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return dx, dk

    return _make(arr, (x, kernel), rule)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary(a, b, fwd, rule_tt, rule_ts):
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"elementwise: incompatible shapes {a.shape} vs {b.shape}")
        return _make(fwd(a.data, b.data), (a, b), rule_tt(a, b))
    s = _dtype()(b)
    return _make(fwd(a.data, s), (a,), rule_ts(a, s))


def add(a, b):
    return _binary(
        a, b, lambda x, y: x + y,
        lambda a, b: lambda g: (g, g),
        lambda a, s: lambda g: (g,),
    )


def sub(a, b):
    return _binary(
        a, b, lambda x, y: x - y,
        lambda a, b: lambda g: (g, -g),
        lambda a, s: lambda g: (g,),
    )


def mul(a, b):
    return _binary(
        a, b, lambda x, y: x * y,
        lambda a, b: lambda g: (g * b.data, g * a.data),
        lambda a, s: lambda g: (g * s,),
    )


scale = mul  # scalar case


def maximum(a, b):
    """Elementwise max; gradient routes to the larger operand, ties to `a`."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"maximum: incompatible shapes {a.shape} vs {b.shape}")
    take_a = a.data >= b.data
    arr = np.where(take_a, a.data, b.data)

    def rule(g):
        return np.where(take_a, g, 0), np.where(take_a, 0, g)

    return _make(arr, (a, b), rule)


def absolute(x):
    """|x|; subgradient 0 at x == 0."""
    arr = np.abs(x.data)
    sign = np.sign(x.data)

    def rule(g):
        return (g * sign,)

    return _make(arr, (x,), rule)


def add_bias(x, b, axis=-1):
    """Add a per-channel vector b along `axis` of x (the only broadcast form)."""
    ax = axis % x.data.ndim
    if b.data.ndim != 1 or b.shape[0] != x.shape[ax]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match axis {axis} of {x.shape}")
    shape = [1] * x.data.ndim
    shape[ax] = b.shape[0]
    arr = x.data + b.data.reshape(shape)
    other = tuple(i for i in range(x.data.ndim) if i != ax)

    def rule(g):
        return g, g.sum(axis=other)

    return _make(arr, (x, b), rule)


def mul_channel(x, w, axis=-1):
    """Multiply x by a per-channel vector w along `axis`."""
    ax = axis % x.data.ndim
    if w.data.ndim != 1 or w.shape[0] != x.shape[ax]:
        raise ShapeError(f"mul_channel: vector {w.shape} does not match axis {axis} of {x.shape}")
    shape = [1] * x.data.ndim
    shape[ax] = w.shape[0]
    wb = w.data.reshape(shape)
    arr = x.data * wb
    other = tuple(i for i in range(x.data.ndim) if i != ax)

    def rule(g):
        return g * wb, (g * x.data).sum(axis=other)

    return _make(arr, (x, w), rule)


# ---------------------------------------------------------------------------
# nonlinearities / normalization
# ---------------------------------------------------------------------------

def take_scalar(x, i):
    """Extract element i of a flat tensor as a 0-d tensor (adjoint: scatter)."""
    arr = x.data.reshape(-1)[i].reshape(())

    def rule(g):
        dx = np.zeros_like(x.data).reshape(-1)
        dx[i] = g.reshape(())
        return (dx.reshape(x.shape),)

    return _make(arr, (x,), rule)


def mul_bcast(x, s):
    """Multiply x by a single-element tensor s (broadcast over all of x)."""
    if s.size != 1:
        raise ShapeError(f"mul_bcast: scale must have one element, got {s.shape}")
    sv = s.data.reshape(())
    arr = x.data * sv

    def rule(g):
        return g * sv, (g * x.data).sum().reshape(s.shape)

    return _make(arr, (x, s), rule)


def softmax(x, axis=-1):
    """Exp-normalize along `axis` with max subtraction; rows sum to 1."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    arr = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * arr).sum(axis=axis, keepdims=True)
        return ((g - dot) * arr,)

    return _make(arr, (x,), rule)


def sigmoid(x):
    d = x.data
    with np.errstate(over="ignore"):
        arr = np.where(d >= 0, 1.0 / (1.0 + np.exp(-d)), np.exp(d) / (1.0 + np.exp(d)))
    arr = arr.astype(d.dtype, copy=False)

    def rule(g):
        return (g * arr * (1.0 - arr),)

    return _make(arr, (x,), rule)


def gelu(x):
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    arr = (d * cdf).astype(d.dtype, copy=False)

    def rule(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * d * d)
        return (g * (cdf + d * pdf),)

    return _make(arr, (x,), rule)


def layernorm(x, gamma, beta, axis=-1, eps=1e-5):
    """Zero-mean/unit-variance over one axis, then affine (gamma, beta)."""
    ax = axis % x.data.ndim
    n = x.shape[ax]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} vs axis length {n}")
    shape = [1] * x.data.ndim
    shape[ax] = n
    mean = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mean
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    arr = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    other = tuple(i for i in range(x.data.ndim) if i != ax)

    def rule(g):
        dgamma = (g * xhat).sum(axis=other)
        dbeta = g.sum(axis=other)
        dxhat = g * gamma.data.reshape(shape)
        m1 = dxhat.mean(axis=ax, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=ax, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _make(arr, (x, gamma, beta), rule)


def batchnorm(x, gamma, beta, running_mean, running_var, mode, momentum=0.1, eps=1e-5):
    """Per-channel batchnorm on x[B,C,H,W].

    Train mode normalizes by batch statistics over (B,H,W) (biased variance)
    and updates the running buffers in place; eval mode uses the buffers.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm: need B,C,H,W input, got {x.shape}")
    bsz, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: affine shapes {gamma.shape}/{beta.shape} vs C={c}")
    axes = (0, 2, 3)
    gshape = (1, c, 1, 1)
    if mode == "train":
        m = bsz * h * w
        if m < 2:
            raise DegenerateBatchError("batchnorm train mode needs >= 2 elements per channel")
        mean = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mean
        var = (xc * xc).mean(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        arr = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

        def rule(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma.data.reshape(gshape)
            m1 = dxhat.mean(axis=axes, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
            return dx, dgamma, dbeta

        return _make(arr, (x, gamma, beta), rule)

    if mode != "eval":
        raise ValueError(f"batchnorm: unknown mode {mode!r}")
    inv = (1.0 / np.sqrt(running_var + eps)).reshape(gshape)
    xhat = (x.data - running_mean.reshape(gshape)) * inv
    arr = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

    def rule(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dx = g * gamma.data.reshape(gshape) * inv
        return dx, dgamma, dbeta

    return _make(arr, (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# reductions / layout
# ---------------------------------------------------------------------------

def _check_axis(x, axis):
    if axis is not None:
        for ax in np.atleast_1d(axis):
            if x.shape[int(ax) % x.data.ndim] == 0:
                raise ShapeError(f"reduce over empty axis {ax} of {x.shape}")
    elif x.size == 0:
        raise ShapeError("reduce over empty tensor")


def reduce_sum(x, axis=None):
    _check_axis(x, axis)
    arr = x.data.sum(axis=axis)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=False),)
        gx = np.expand_dims(g, axis)
        return (np.broadcast_to(gx, x.shape).copy(),)

    return _make(arr, (x,), rule)


def reduce_mean(x, axis=None):
    _check_axis(x, axis)
    arr = x.data.mean(axis=axis)
    n = x.size if axis is None else np.prod([x.shape[int(a) % x.data.ndim] for a in np.atleast_1d(axis)])

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape).astype(x.data.dtype, copy=False),)
        gx = np.expand_dims(g / n, axis)
        return (np.broadcast_to(gx, x.shape).copy(),)

    return _make(arr, (x,), rule)


def avgpool_global(x):
    """Average over the token axis of x[..., S, C] -> [..., C]."""
    return reduce_mean(x, axis=-2)


def concat(tensors, axis=0):
    tensors = list(tensors)
    ref = list(tensors[0].shape)
    ax = axis % len(ref)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or s[:ax] != ref[:ax] or s[ax + 1 :] != ref[ax + 1 :]:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} vs {t.shape} on axis {axis}")
    arr = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(arr, tuple(tensors), rule)


def reshape(x, shape):
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: {x.shape} -> {tuple(shape)} changes element count")
    arr = x.data.reshape(shape)

    def rule(g):
        return (g.reshape(x.shape),)

    return _make(arr, (x,), rule)


def transpose(x, perm):
    perm = tuple(perm)
    if sorted(perm) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: {perm} is not a permutation of {x.data.ndim} axes")
    arr = x.data.transpose(perm)
    inv = tuple(np.argsort(perm))

    def rule(g):
        return (g.transpose(inv),)

    return _make(arr, (x,), rule)


def upsample_nearest(x, factor=2):
    """Nearest-neighbour upsampling of x[B,C,H,W] by an integer factor."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest: need B,C,H,W input, got {x.shape}")
    f = int(factor)
    arr = x.data.repeat(f, axis=2).repeat(f, axis=3)
    bsz, c, h, w = x.shape

    def rule(g):
        return (g.reshape(bsz, c, h, f, w, f).sum(axis=(3, 5)),)

    return _make(arr, (x,), rule)


def pad_reflect(x, p=1):
    """Reflect-pad the last two axes of x[B,C,H,W] by p (no edge repeat)."""
    if x.data.ndim != 4:
        raise ShapeError(f"pad_reflect: need B,C,H,W input, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if p >= h or p >= w:
        raise ShapeError(f"pad_reflect: pad {p} too large for spatial size {h}x{w}")
    arr = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
    idx_h = np.abs(np.arange(-p, h + p))
    idx_h = np.where(idx_h >= h, 2 * h - 2 - idx_h, idx_h)
    idx_w = np.abs(np.arange(-p, w + p))
    idx_w = np.where(idx_w >= w, 2 * w - 2 - idx_w, idx_w)

    def rule(g):
        tmp = np.zeros(g.shape[:3] + (w,), dtype=g.dtype)
        for j in range(w + 2 * p):
            tmp[:, :, :, idx_w[j]] += g[:, :, :, j]
        dx = np.zeros(x.shape, dtype=g.dtype)
        for i in range(h + 2 * p):
            dx[:, :, idx_h[i], :] += tmp[:, :, i, :]
        return (dx,)

    return _make(arr, (x,), rule)


# ---------------------------------------------------------------------------
# backward / gradient check
# ---------------------------------------------------------------------------

def backward(loss):
    """Populate grads of everything reachable from `loss` on the active tape."""
    tape = _active_tape()
    if tape is None or not tape.nodes:
        raise RuntimeError("backward: no active non-empty tape")
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, rule in reversed(tape.nodes):
        if out.grad is None:
            continue
        grads = rule(out.grad)
        for t, g in zip(inputs, grads):
            if not t.requires_grad or g is None:
                continue
            if t.grad is None:
                t.grad = g.reshape(t.shape).copy()
            else:
                t.grad += g.reshape(t.shape)


def grad_check(f, x, h=1e-5):
    """Max relative error between analytic grad of scalar f(x) and central differences.

    Must run in 64-bit mode; denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if _dtype() is not np.float64:
        raise RuntimeError("grad_check requires precision('float64')")
    x.grad = None
    with Tape():
        y = f(x)
        backward(y)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
