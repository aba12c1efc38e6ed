"""Degradation-aware channel modulation via prototype decomposition.

A bank of K learnable prototype vectors (rows of W_proto[K, C]) encodes
per-channel response strengths. The semantic prior is pooled and mapped to K
sigmoid activation scores; their prototype combination gates a channel-wise
layernorm of the feature map, added back residually:

    s_K    = sigmoid(LN(MLP(avgpool(S_prior))))
    w_c    = sigmoid(s_K @ W_proto)
    F_out  = LN_c(F_in) * w_c + F_in

At initialization the prototype rows are pairwise orthogonal with entries in
[-1, 1] (max |entry| exactly 1); training is free to move them afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import layer_norm, mlp
from .tensor import ShapeError, Tensor


def orthogonal_prototypes(k, c, seed):
    """Seeded K x C matrix: orthogonal rows, entries in [-1,1], max |entry| = 1.

    Modified Gram-Schmidt in float64, unit rows, then one global scale by the
    largest |entry| (a scalar scale preserves orthogonality and pins the max).
    """
    if k > c:
        raise ShapeError(f"prototype count {k} exceeds channel count {c}")
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(k, c)).astype(np.float64)
    for i in range(k):
        for j in range(i):
            m[i] -= (m[i] @ m[j]) * m[j]
        norm = np.linalg.norm(m[i])
        while norm < 1e-8:  # vanishing direction: redraw
            m[i] = rng.normal(size=c)
            for j in range(i):
                m[i] -= (m[i] @ m[j]) * m[j]
            norm = np.linalg.norm(m[i])
        m[i] /= norm
    return m / np.abs(m).max()


def init_prototypes(store, k, c, name="dcam.proto"):
    """Register the prototype bank (learnable) in `store`."""
    return store.get(name, (k, c), init=lambda rng, shape: orthogonal_prototypes(
        shape[0], shape[1], rng.integers(0, 2**31 - 1)
    ))


def prototype_scores(store, prior, k, name="dcam.score"):
    """sigmoid(LN(MLP(avgpool(S_prior)))) -> Tensor[K] in (0,1)."""
    tokens = prior.tokens if hasattr(prior, "tokens") else prior
    pooled = T.avgpool_global(tokens)  # [C]
    h = mlp(store, name, pooled, [tokens.shape[-1], k])
    h = layer_norm(store, f"{name}.ln", h, k)
    return T.sigmoid(h)


def channel_weights(s, bank):
    """sigmoid(s_K @ W_proto) -> Tensor[C]."""
    k = s.shape[-1]
    if bank.shape[0] != k:
        raise ShapeError(f"scores have {k} entries but bank has {bank.shape[0]} prototypes")
    d = T.matmul(T.reshape(s, (1, k)), bank)  # [1, C]
    return T.sigmoid(T.reshape(d, (bank.shape[1],)))


def modulate(store, f_in, s, bank, name="dcam.mod"):
    """Gated residual: LN over channels per site, scaled by w_c, plus F_in."""
    c = f_in.shape[-1]
    if bank.shape[1] != c:
        raise ShapeError(f"feature channels {c} != prototype width {bank.shape[1]}")
    normed = layer_norm(store, f"{name}.ln", f_in, c)
    gate = channel_weights(s, bank)
    return T.add(T.mul_channel(normed, gate, axis=-1), f_in)


@dataclass
class DegradationDecomposition:
    scores: np.ndarray  # s_K
    proportions: np.ndarray  # s_K normalized to sum 1
    combination: np.ndarray  # D_s = s_K @ W_proto, pre-sigmoid
    activated: list  # per prototype: top-n channel indices by entry
    suppressed: list  # per prototype: top-n most negative entries


def decompose_report(s, bank, top_n=10):
    """Prototype proportions and per-prototype channel rankings for export."""
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
    w = np.asarray(bank.data if isinstance(bank, Tensor) else bank, dtype=np.float64)
    combination = s @ w
    total = s.sum()
    proportions = s / total if total > 0 else np.full_like(s, 1.0 / len(s))
    activated = [list(np.argsort(-row)[:top_n]) for row in w]
    suppressed = [list(np.argsort(row)[:top_n]) for row in w]
    return DegradationDecomposition(
        scores=s, proportions=proportions, combination=combination,
        activated=activated, suppressed=suppressed,
    )
