"""Named gradient checks for every layer and the full network.

Each check runs in 64-bit mode with central differences (h=1e-5 unless noted)
and returns its max relative error. Per-op tolerances are 1e-5; deep
composites (full network, losses near their L1 kinks) get 1e-4. Scalars fed to
the checker are elementwise-centered against a baseline forward where the raw
output magnitudes would otherwise drown the finite differences in rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dcam, dmoe
from . import tensor as T
from .fusenet import FuseNet, FuseNetConfig
from .layers import AttentionConfig, ParamStore, attention, mlp, transformer_block
from .losses import fusion_loss
from .prior import project_prior, refine_prior
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self):
        return self.error <= self.tolerance


def _rand(seed, shape):
    return np.random.default_rng(seed).normal(size=shape)


def _centered(fwd, x):
    baseline = Tensor(fwd(x).data.copy())
    return lambda v: T.reduce_mean(T.sub(fwd(v), baseline))


def run_gradient_suite(include_full_net=True):
    """Returns a list of CheckResult; everything runs under float64."""
    results = []

    def check(name, f, x, tol=1e-5, h=1e-5):
        x.grad = None
        err = T.grad_check(f, x, h=h)
        results.append(CheckResult(name, err, tol))

    with T.precision("float64"):
        # --- primitive ops ---
        b = Tensor(_rand(1, (4, 3)))
        check("matmul", lambda v: T.reduce_sum(T.mul(T.matmul(v, b), T.matmul(v, b))),
              Tensor(_rand(2, (3, 4)), requires_grad=True))
        k = Tensor(_rand(3, (2, 2, 3, 3)))
        check("conv2d.input", lambda v: T.reduce_sum(T.sigmoid(T.conv2d(v, k, stride=2, pad=1))),
              Tensor(_rand(4, (1, 2, 6, 6)), requires_grad=True))
        xc = Tensor(_rand(5, (1, 2, 4, 4)))
        check("conv2d.kernel", lambda v: T.reduce_sum(T.sigmoid(T.conv2d(xc, v, stride=1, pad=1))),
              Tensor(_rand(6, (2, 2, 3, 3)), requires_grad=True))
        eb = Tensor(_rand(7, (3, 3)))
        check("elementwise", lambda v: T.reduce_sum(T.mul(T.add(v, eb), T.sub(v, eb))),
              Tensor(_rand(8, (3, 3)), requires_grad=True))
        check("softmax", lambda v: T.reduce_sum(T.mul(T.softmax(v), T.softmax(v))),
              Tensor(_rand(9, (2, 5)), requires_grad=True))
        check("sigmoid", lambda v: T.reduce_sum(T.sigmoid(v)),
              Tensor(_rand(10, (7,)), requires_grad=True))
        check("gelu", lambda v: T.reduce_sum(T.gelu(v)),
              Tensor(_rand(11, (7,)), requires_grad=True))
        g_ln = Tensor(_rand(12, (4,)))
        b_ln = Tensor(_rand(13, (4,)))
        r_ln = Tensor(_rand(14, (3, 4)))
        check("layernorm", lambda v: T.reduce_sum(T.mul(T.layernorm(v, g_ln, b_ln), r_ln)),
              Tensor(_rand(15, (3, 4)), requires_grad=True))
        r_bn = Tensor(_rand(16, (2, 2, 2, 2)))
        check(
            "batchnorm",
            lambda v: T.reduce_sum(
                T.mul(T.batchnorm(v, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                                  np.zeros(2), np.ones(2), mode="train"), r_bn)
            ),
            Tensor(_rand(17, (2, 2, 2, 2)), requires_grad=True),
        )
        check(
            "layout",
            lambda v: T.reduce_sum(T.mul(T.transpose(T.reshape(v, (2, 6)), (1, 0)),
                                         T.transpose(T.reshape(v, (2, 6)), (1, 0)))),
            Tensor(_rand(18, (3, 4)), requires_grad=True),
        )
        check("upsample", lambda v: T.reduce_sum(T.mul(T.upsample_nearest(v, 2), T.upsample_nearest(v, 2))),
              Tensor(_rand(19, (1, 1, 2, 3)), requires_grad=True))
        check("pad_reflect", lambda v: T.reduce_sum(T.mul(T.pad_reflect(v, 1), T.pad_reflect(v, 1))),
              Tensor(_rand(20, (1, 1, 3, 4)), requires_grad=True))

        # --- layers ---
        s1 = ParamStore(30)
        x1 = Tensor(_rand(21, (2, 4)), requires_grad=True)
        mlp(s1, "m", x1, [4, 6, 2])
        check("mlp", lambda v: T.reduce_sum(T.gelu(mlp(s1, "m", v, [4, 6, 2]))), x1)
        s2 = ParamStore(31)
        acfg = AttentionConfig(4, 2)
        x2 = Tensor(_rand(22, (3, 4)), requires_grad=True)
        attention(s2, "a", x2, x2, acfg)
        check("attention", lambda v: T.reduce_sum(T.sigmoid(attention(s2, "a", v, v, acfg))), x2)
        s3 = ParamStore(32)
        x3 = Tensor(_rand(23, (3, 4)), requires_grad=True)
        transformer_block(s3, "blk", x3, acfg)
        check("transformer_block",
              lambda v: T.reduce_sum(T.sigmoid(transformer_block(s3, "blk", v, acfg))), x3)

        # --- prior projection/refinement ---
        s4 = ParamStore(33)
        x4 = Tensor(_rand(24, (3, 6)), requires_grad=True)

        def dspe(v):
            emb = project_prior(s4, v, 4)
            return T.reduce_sum(T.sigmoid(refine_prior(s4, emb).tokens))

        dspe(x4)
        check("dspe", dspe, x4)

        # --- channel modulation ---
        s5 = ParamStore(34)
        bank = Tensor(dcam.orthogonal_prototypes(2, 4, 5))
        sk = Tensor(np.array([0.3, 0.8]))
        x5 = Tensor(_rand(25, (2, 3, 4)), requires_grad=True)
        dcam.modulate(s5, x5, sk, bank)
        check("dcam.modulate", lambda v: T.reduce_sum(T.sigmoid(dcam.modulate(s5, v, sk, bank))), x5)

        # --- mixture of experts ---
        s6 = ParamStore(35)
        from .prior import SemanticPrior

        sp = SemanticPrior(tokens=Tensor(_rand(26, (3, 4))))

        def moe(v):
            att = dmoe.cross_attend(s6, v, sp)
            w = dmoe.route(s6, att, 3)
            outs = dmoe.experts_forward(s6, v, 3)
            return T.reduce_sum(T.sigmoid(dmoe.mix(s6, outs, w, mode="train")))

        x6 = Tensor(_rand(27, (2, 2, 4)), requires_grad=True)
        moe(x6)
        check("dmoe", moe, x6)

        # --- losses (inputs perturbed away from L1 kinks) ---
        rngl = np.random.default_rng(28)
        vi_l = Tensor(rngl.uniform(0.1, 0.9, (8, 8, 3)))
        ir_l = Tensor(rngl.uniform(0.1, 0.9, (8, 8, 1)))
        f_l = Tensor(np.clip(vi_l.data + rngl.normal(0.05, 0.03, (8, 8, 3)), 0.01, 0.99),
                     requires_grad=True)
        check("losses.fusion", lambda v: fusion_loss(v, vi_l, ir_l)[0], f_l, tol=1e-4, h=1e-6)

        if include_full_net:
            cfg = FuseNetConfig(image_size=16, channels=8, heads=2, encoder_blocks=2,
                                prototypes=2, experts=3, prior_tokens=4, prior_width=8,
                                init_seed=0)
            net = FuseNet(cfg)
            rng = np.random.default_rng(29)
            ir_t = Tensor(rng.uniform(0, 1, (16, 16, 1)))
            raw = Tensor(rng.normal(size=(4, 8)))

            def fwd(v):
                spr = net.prepare_prior(raw)
                out, _, _ = net.forward_t(v, ir_t, spr, mode="train")
                return out

            x7 = Tensor(rng.uniform(0.2, 0.8, (16, 16, 3)), requires_grad=True)
            check("fusenet.full", _centered(fwd, x7), x7, tol=1e-4)

    return results
