"""Composable trainable layers on the tensor core, with deterministic init.

Parameters live in a ParamStore and are created lazily on first use, keyed by
name. Initialization is a pure function of (init_seed, name), so two runs with
the same seed produce bit-identical parameters regardless of creation order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def _name_rng(seed, name):
    digest = hashlib.sha256(name.encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng([seed & 0xFFFFFFFF] + words)


class ParamStore:
    """Ordered name -> Tensor map; every parameter registered exactly once."""

    def __init__(self, init_seed=0):
        self.init_seed = init_seed
        self.params = {}
        self.buffers = {}  # running statistics etc., plain ndarrays

    def get(self, name, shape, init="uniform_fanin"):
        shape = tuple(shape)
        if name in self.params:
            p = self.params[name]
            if p.shape != shape:
                raise ShapeError(f"parameter {name!r}: registered {p.shape}, requested {shape}")
            return p
        rng = _name_rng(self.init_seed, name)
        if init == "uniform_fanin":
            # linear weights are (In, Out); conv kernels are (O, C, k, k)
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif callable(init):
            data = init(rng, shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Tensor(data, requires_grad=True)
        self.params[name] = p
        return p

    def buffer(self, name, shape, fill=0.0):
        if name in self.buffers:
            return self.buffers[name]
        buf = np.full(tuple(shape), fill, dtype=np.float64)
        self.buffers[name] = buf
        return buf

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def total_params(self):
        return sum(p.size for p in self.params.values())

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())


@dataclass
class AttentionConfig:
    model_dim: int
    head_count: int = 2

    def __post_init__(self):
        if self.model_dim % self.head_count:
            raise ShapeError(
                f"model_dim {self.model_dim} not divisible by head_count {self.head_count}"
            )

    @property
    def key_dim(self):
        return self.model_dim // self.head_count


def _flatten_leading(x):
    lead = x.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    return T.reshape(x, (n, x.shape[-1])), lead


def linear(store, name, x, out_dim):
    """x[..., In] @ W[In, Out] + b[Out]; W ~ uniform(-1/sqrt(In), 1/sqrt(In))."""
    in_dim = x.shape[-1]
    w = store.get(f"{name}.w", (in_dim, out_dim))
    b = store.get(f"{name}.b", (out_dim,), init="zeros")
    x2, lead = _flatten_leading(x)
    y = T.add_bias(T.matmul(x2, w), b)
    return T.reshape(y, lead + (out_dim,))


def mlp(store, name, x, dims):
    """Alternating linear+GELU over `dims`; no activation after the last layer."""
    if len(dims) < 2:
        raise ShapeError(f"mlp needs >= 2 dims, got {dims}")
    if x.shape[-1] != dims[0]:
        raise ShapeError(f"mlp input width {x.shape[-1]} != dims[0] {dims[0]}")
    h = x
    last = len(dims) - 2
    for i, out_dim in enumerate(dims[1:]):
        h = linear(store, f"{name}.{i}", h, out_dim)
        if i != last:
            h = T.gelu(h)
    return h


def layer_norm(store, name, x, width, axis=-1):
    gamma = store.get(f"{name}.g", (width,), init="ones")
    beta = store.get(f"{name}.b", (width,), init="zeros")
    return T.layernorm(x, gamma, beta, axis=axis)


def attention(store, name, q_src, kv_src, cfg):
    """Multi-head scaled dot-product attention with output projection.

    q_src[S_q, C], kv_src[S_kv, C] -> [S_q, C]; self-attention is
    attention(x, x, cfg). Per-head projections are separate fan-in-initialized
    linear maps, equivalent to one packed C x C projection.
    """
    c = cfg.model_dim
    if q_src.shape[-1] != c or kv_src.shape[-1] != c:
        raise ShapeError(
            f"attention: channel dims {q_src.shape[-1]}/{kv_src.shape[-1]} != model_dim {c}"
        )
    dk = cfg.key_dim
    inv_sqrt_dk = 1.0 / np.sqrt(dk)
    heads = []
    for h in range(cfg.head_count):
        q = linear(store, f"{name}.q{h}", q_src, dk)
        k = linear(store, f"{name}.k{h}", kv_src, dk)
        v = linear(store, f"{name}.v{h}", kv_src, dk)
        scores = T.mul(T.matmul(q, T.transpose(k, (1, 0))), inv_sqrt_dk)
        heads.append(T.matmul(T.softmax(scores, axis=-1), v))
    merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
    return linear(store, f"{name}.out", merged, c)


def transformer_block(store, name, x, cfg):
    """Pre-norm residual block: x + attn(LN(x)), then + mlp(LN(.)), ratio 4."""
    c = cfg.model_dim
    xn = layer_norm(store, f"{name}.ln1", x, c)
    h = T.add(x, attention(store, f"{name}.attn", xn, xn, cfg))
    hn = layer_norm(store, f"{name}.ln2", h, c)
    return T.add(h, mlp(store, f"{name}.mlp", hn, [c, 4 * c, c]))


def linear_param_count(in_dim, out_dim):
    return in_dim * out_dim + out_dim


def attention_param_count(cfg):
    c, dk = cfg.model_dim, cfg.key_dim
    per_head = 3 * linear_param_count(c, dk)
    return cfg.head_count * per_head + linear_param_count(c, c)


def transformer_block_param_count(cfg):
    c = cfg.model_dim
    return (
        2 * 2 * c  # two layer norms, gamma+beta each
        + attention_param_count(cfg)
        + linear_param_count(c, 4 * c)
        + linear_param_count(4 * c, c)
    )
