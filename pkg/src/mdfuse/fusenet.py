"""End-to-end fusion network: dual encoders -> concat -> channel modulation ->
mixture-of-experts -> decoder.

Each modality has its own encoder: two stride-2 3x3 convs (patch embedding,
overall stride 4) followed by 4 pre-norm transformer blocks at width C/2. The
concatenated C-channel map is modulated by the prototype gate (when enabled),
cross-attended with the semantic prior for routing (when enabled), run through
all N experts, mixed, and decoded back to an RGB image in [0,1] by two
nearest-neighbour upsample + conv stages and a sigmoid head.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, asdict

import numpy as np

from . import dcam, dmoe
from . import tensor as T
from .imageio import ImageBuffer
from .layers import AttentionConfig, ParamStore, transformer_block, transformer_block_param_count
from .prior import project_prior, refine_prior
from .tensor import ShapeError, Tensor


@dataclass
class FuseNetConfig:
    image_size: int = 64
    channels: int = 16  # C after concat; each encoder runs at C/2
    heads: int = 2
    encoder_blocks: int = 4
    prototypes: int = 4  # K
    experts: int = 5  # N
    prior_tokens: int = 8  # S
    prior_width: int = 64  # C_org
    use_dcam: bool = True
    use_dmoe: bool = True
    refine_residual: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.image_size % 4:
            raise ShapeError(f"image_size {self.image_size} not divisible by 4")
        if self.channels % 2:
            raise ShapeError(f"channels {self.channels} must be even")
        if (self.channels // 2) % self.heads:
            raise ShapeError(
                f"encoder width {self.channels // 2} not divisible by heads {self.heads}"
            )
        if self.prototypes > self.channels:
            raise ShapeError(f"prototypes {self.prototypes} > channels {self.channels}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    @property
    def needs_prior(self):
        return self.use_dcam or self.use_dmoe

    def param_count(self):
        """Closed-form parameter count for this configuration."""
        c = self.channels
        c2 = c // 2
        acfg = AttentionConfig(c2, self.heads)

        def conv(o, i, k):
            return o * i * k * k + o

        def lin(i, o):
            return i * o + o

        encoder = lambda in_ch: (
            conv(c2, in_ch, 3) + conv(c2, c2, 3)
            + self.encoder_blocks * transformer_block_param_count(acfg)
        )
        total = encoder(3) + encoder(1)
        if self.needs_prior:
            total += lin(self.prior_width, c) + 2 * c  # projection + LN
            total += 3 * c * c  # refine W_q, W_k, W_v
        if self.use_dcam:
            k = self.prototypes
            total += k * c  # bank
            total += lin(c, k) + 2 * k  # score MLP + LN
            total += 2 * c  # modulate LN
        if self.use_dmoe:
            total += 3 * c * c  # cross-attention projections
        c4 = max(1, c // 4)
        total += lin(c, c4) + 2 * c4 + 2 * c + lin(c4 + c, self.experts)  # router
        total += self.experts * (conv(c, c, 3) + conv(c, c, 1))
        total += 2 * c  # mix batchnorm affine
        total += 2 * conv(c, c, 3) + conv(3, c, 3)  # decoder
        return total


@dataclass
class ForwardTrace:
    f_vi: np.ndarray = None
    f_ir: np.ndarray = None
    f_in: np.ndarray = None
    s_k: np.ndarray = None
    f_dcam: np.ndarray = None
    w: np.ndarray = None
    f_dmoe: np.ndarray = None
    i_f: np.ndarray = None


def _to_bchw(x):
    h, w, c = x.shape
    return T.reshape(T.transpose(x, (2, 0, 1)), (1, c, h, w))


def _from_bchw(x):
    _, c, h, w = x.shape
    return T.transpose(T.reshape(x, (c, h, w)), (1, 2, 0))


class FuseNet:
    """One model instance owns its ParamStore; forward is per image."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.store = ParamStore(cfg.init_seed)

    # -- prior -------------------------------------------------------------

    def prepare_prior(self, raw):
        """Project and refine a raw provider prior into the working width."""
        embed = project_prior(self.store, raw, self.cfg.channels)
        return refine_prior(self.store, embed, residual=self.cfg.refine_residual)

    # -- encoder -----------------------------------------------------------

    def _encode_one(self, name, x):
        cfg = self.cfg
        c2 = cfg.channels // 2
        h, w, ch = x.shape
        t = _to_bchw(x)
        k0 = self.store.get(f"{name}.patch0.k", (c2, ch, 3, 3))
        b0 = self.store.get(f"{name}.patch0.b", (c2,), init="zeros")
        t = T.gelu(T.add_bias(T.conv2d(t, k0, stride=2, pad=1), b0, axis=1))
        k1 = self.store.get(f"{name}.patch1.k", (c2, c2, 3, 3))
        b1 = self.store.get(f"{name}.patch1.b", (c2,), init="zeros")
        t = T.add_bias(T.conv2d(t, k1, stride=2, pad=1), b1, axis=1)
        hq, wq = h // 4, w // 4
        tokens = T.transpose(T.reshape(t, (c2, hq * wq)), (1, 0))
        acfg = AttentionConfig(c2, cfg.heads)
        for i in range(cfg.encoder_blocks):
            tokens = transformer_block(self.store, f"{name}.blk{i}", tokens, acfg)
        return T.transpose(T.reshape(T.transpose(tokens, (1, 0)), (c2, hq, wq)), (1, 2, 0))

    def encode_t(self, vi_t, ir_t):
        h, w, _ = vi_t.shape
        if h % 4 or w % 4:
            raise ShapeError(f"spatial size {h}x{w} not divisible by the stride-4 encoder")
        if ir_t.shape[:2] != (h, w):
            raise ShapeError(f"visible {vi_t.shape} and infrared {ir_t.shape} sizes differ")
        f_vi = self._encode_one("enc.vi", vi_t)
        f_ir = self._encode_one("enc.ir", ir_t)
        return f_vi, f_ir, T.concat([f_vi, f_ir], axis=-1)

    # -- decoder -----------------------------------------------------------

    def decode_t(self, f, mode="train"):
        x = _to_bchw(f)
        c = self.cfg.channels
        for i in range(2):
            k = self.store.get(f"dec.up{i}.k", (c, c, 3, 3))
            b = self.store.get(f"dec.up{i}.b", (c,), init="zeros")
            x = T.gelu(T.add_bias(T.conv2d(T.upsample_nearest(x, 2), k, stride=1, pad=1), b, axis=1))
        kh = self.store.get("dec.head.k", (3, c, 3, 3))
        bh = self.store.get("dec.head.b", (3,), init="zeros")
        x = T.sigmoid(T.add_bias(T.conv2d(x, kh, stride=1, pad=1), bh, axis=1))
        return _from_bchw(x)

    # -- full forward ------------------------------------------------------

    def forward_t(self, vi_t, ir_t, sprior=None, mode="train", trace=False):
        cfg = self.cfg
        if cfg.needs_prior and sprior is None:
            raise ValueError("this configuration needs a semantic prior")
        f_vi, f_ir, f_in = self.encode_t(vi_t, ir_t)
        s_k = None
        if cfg.use_dcam:
            bank = dcam.init_prototypes(self.store, cfg.prototypes, cfg.channels)
            s_k = dcam.prototype_scores(self.store, sprior, cfg.prototypes)
            f_d = dcam.modulate(self.store, f_in, s_k, bank)
        else:
            f_d = f_in
        if cfg.use_dmoe:
            att = dmoe.cross_attend(self.store, f_d, sprior)
        else:
            hq, wq, c = f_d.shape
            att = T.reshape(f_d, (hq * wq, c))
        w = dmoe.route(self.store, att, cfg.experts)
        experts = dmoe.experts_forward(self.store, f_d, cfg.experts)
        f_m = dmoe.mix(self.store, experts, w, mode=mode)
        i_f = self.decode_t(f_m, mode=mode)
        if not trace:
            return i_f, w, None
        tr = ForwardTrace(
            f_vi=f_vi.data.copy(), f_ir=f_ir.data.copy(), f_in=f_in.data.copy(),
            s_k=None if s_k is None else s_k.data.copy(),
            f_dcam=f_d.data.copy(), w=w.data.copy(), f_dmoe=f_m.data.copy(),
            i_f=i_f.data.copy(),
        )
        return i_f, w, tr

    def forward(self, vi, ir, sprior=None, trace=False):
        """Inference on ImageBuffers (eval-mode statistics); returns an ImageBuffer."""
        vi_t = Tensor(vi.pixels)
        ir_t = Tensor(ir.pixels)
        i_f, _, tr = self.forward_t(vi_t, ir_t, sprior, mode="eval", trace=trace)
        out = ImageBuffer.from_array(np.clip(i_f.data.astype(np.float64), 0.0, 1.0))
        return (out, tr) if trace else out
