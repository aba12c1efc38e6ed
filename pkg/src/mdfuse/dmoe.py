"""Degradation-aware mixture of experts with prior-guided routing.

The modulated feature map cross-attends to the semantic prior (features as
queries, prior tokens as keys/values, residual add). A dual-branch reduction
turns the attended tokens into a fixed-length vector, a linear map produces N
logits, and softmax yields dense routing weights. All N experts (conv3x3 then
conv1x1) run on the modulated features; their weighted sum is batch-normalized
and GELU-activated. No top-k sparsity and no auxiliary balancing loss: routing
balance comes from the prior guidance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import layer_norm, linear
from .tensor import ShapeError, Tensor


def _to_bchw(x):
    h, w, c = x.shape
    return T.reshape(T.transpose(x, (2, 0, 1)), (1, c, h, w))


def _from_bchw(x):
    _, c, h, w = x.shape
    return T.transpose(T.reshape(x, (c, h, w)), (1, 2, 0))


def cross_attend(store, f_dcam, prior, name="dmoe.cross"):
    """Features query the prior tokens; residual add; -> [(H*W), C]."""
    tokens = prior.tokens if hasattr(prior, "tokens") else prior
    h, w, c = f_dcam.shape
    if tokens.shape[-1] != c:
        raise ShapeError(f"prior width {tokens.shape[-1]} != feature channels {c}")
    flat = T.reshape(f_dcam, (h * w, c))
    wq = store.get(f"{name}.wq", (c, c))
    wk = store.get(f"{name}.wk", (c, c))
    wv = store.get(f"{name}.wv", (c, c))
    q = T.matmul(flat, wq)
    k = T.matmul(tokens, wk)
    v = T.matmul(tokens, wv)
    att = T.softmax(T.mul(T.matmul(q, T.transpose(k, (1, 0))), 1.0 / np.sqrt(c)), axis=-1)
    return T.add(T.matmul(att, v), flat)


def route(store, attended, n_experts, name="dmoe.route"):
    """Dual-branch reduction of [(H*W), C] tokens -> softmax weights [N]."""
    c = attended.shape[-1]
    c4 = max(1, c // 4)
    # branch I: per-token linear C -> C/4, LN, GELU, then token mean
    b1 = T.gelu(layer_norm(store, f"{name}.b1.ln", linear(store, f"{name}.b1", attended, c4), c4))
    b1 = T.reduce_mean(b1, axis=0)
    # branch II: LN, GELU, token mean
    b2 = T.reduce_mean(T.gelu(layer_norm(store, f"{name}.b2.ln", attended, c)), axis=0)
    fused = T.concat([b1, b2], axis=-1)
    logits = linear(store, f"{name}.fuse", fused, n_experts)
    return T.softmax(logits, axis=-1)


def experts_forward(store, f_dcam, n_experts, name="dmoe.expert"):
    """N structurally identical experts: conv3x3 (same) then conv1x1."""
    c = f_dcam.shape[-1]
    x = _to_bchw(f_dcam)
    outs = []
    for i in range(n_experts):
        k3 = store.get(f"{name}{i}.k3", (c, c, 3, 3))
        b3 = store.get(f"{name}{i}.b3", (c,), init="zeros")
        k1 = store.get(f"{name}{i}.k1", (c, c, 1, 1))
        b1 = store.get(f"{name}{i}.b1", (c,), init="zeros")
        h = T.add_bias(T.conv2d(x, k3, stride=1, pad=1), b3, axis=1)
        h = T.add_bias(T.conv2d(h, k1, stride=1, pad=0), b1, axis=1)
        outs.append(_from_bchw(h))
    return outs


def weighted_sum(e_list, w):
    """Dense mixture sum_i w_i * E_i in fixed expert order."""
    if len(e_list) != w.shape[-1]:
        raise ShapeError(f"{len(e_list)} experts vs {w.shape[-1]} routing weights")
    acc = T.mul_bcast(e_list[0], T.take_scalar(w, 0))
    for i in range(1, len(e_list)):
        acc = T.add(acc, T.mul_bcast(e_list[i], T.take_scalar(w, i)))
    return acc


def mix(store, e_list, w, mode="train", name="dmoe.mix"):
    """GELU(batchnorm(sum_i w_i E_i)); running stats live in store buffers."""
    pre = weighted_sum(e_list, w)
    c = pre.shape[-1]
    gamma = store.get(f"{name}.bn.g", (c,), init="ones")
    beta = store.get(f"{name}.bn.b", (c,), init="zeros")
    rm = store.buffer(f"{name}.bn.mean", (c,), 0.0)
    rv = store.buffer(f"{name}.bn.var", (c,), 1.0)
    y = T.batchnorm(_to_bchw(pre), gamma, beta, rm, rv, mode=mode)
    return _from_bchw(T.gelu(y))


@dataclass
class RoutingReport:
    per_image: np.ndarray  # [M, N]
    mean_usage: np.ndarray  # [N]
    entropy_nats: float  # entropy of the mean usage

    def rows(self):
        """CSV rows: one per image plus an aggregate line."""
        out = [["image"] + [f"expert_{i}" for i in range(self.per_image.shape[1])]]
        for i, w in enumerate(self.per_image):
            out.append([str(i)] + [f"{v:.6f}" for v in w])
        out.append(["mean"] + [f"{v:.6f}" for v in self.mean_usage])
        out.append(["entropy_nats", f"{self.entropy_nats:.6f}"])
        return out


def routing_report(batch_w):
    """Aggregate routing weights [M, N] into usage stats and entropy (nats)."""
    arr = np.asarray(
        [w.data if isinstance(w, Tensor) else w for w in batch_w], dtype=np.float64
    )
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ShapeError(f"routing_report needs a nonempty batch of weight rows, got {arr.shape}")
    mean = arr.mean(axis=0)
    p = mean[mean > 0]
    entropy = float(-(p * np.log(p)).sum())
    return RoutingReport(per_image=arr, mean_usage=mean, entropy_nats=entropy)
