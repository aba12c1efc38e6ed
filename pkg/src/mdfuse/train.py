"""Training loop: Adam with warm-up + polynomial decay, dataset plumbing,
checkpoint/resume with bit-identical replay, and post-training diagnostics.

Determinism contract: given the same config and dataset, a run resumed from a
checkpoint at step k produces byte-identical parameters, logs, and outputs to
an uninterrupted run. Everything consumed per step (batch indices) comes from
one Generator whose state is checkpointed; priors are pure functions of the
image and provider seed and are cached, never drawn from the training stream.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np

from . import dcam as dcam_mod
from . import dmoe as dmoe_mod
from . import tensor as T
from .degrade import load_index, load_record
from .fusenet import FuseNet, FuseNetConfig
from .imageio import assign_params, load_checkpoint, save_checkpoint, write_image, ImageBuffer
from .losses import fusion_loss
from .metrics import evaluate_fusion, psnr
from .prior import PriorProviderConfig, extract_prior, make_provider
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; diagnostics were dumped."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    steps: int = 500
    warmup_steps: int = 25
    poly_power: float = 0.9
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0  # 0: final checkpoint only
    model: FuseNetConfig = field(default_factory=FuseNetConfig)
    provider: PriorProviderConfig = field(default_factory=PriorProviderConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be > 0")
        if isinstance(self.model, dict):
            self.model = FuseNetConfig.from_dict(self.model)
        if isinstance(self.provider, dict):
            self.provider = _provider_from_dict(self.provider)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _provider_from_dict(d):
    known = {f.name for f in fields(PriorProviderConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown provider config keys: {sorted(unknown)}")
    return PriorProviderConfig(**d)


# "paper" records the full-scale hyperparameters for reference; they are far
# beyond desk scale. The toy preset is what the committed regression runs
# (lr and width measured against the 0.4x loss-ratio bound; see
# scripts/run_toy_benchmark.py).
PRESETS = {
    "toy": {"lr": 2e-3, "batch_size": 8, "steps": 500, "warmup_steps": 25},
    "paper": {"lr": 6e-5, "batch_size": 15, "steps": 476_600, "warmup_steps": 23_830},
}
TOY_MODEL_WIDTH = 24


def lr_schedule(step, total_steps, cfg):
    """Linear warmup 0 -> lr over warmup_steps, then polynomial decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = cfg.warmup_steps
    if w > 0 and step < w:
        return cfg.lr * step / w
    if total_steps == w:
        return cfg.lr
    frac = (step - w) / (total_steps - w)
    return cfg.lr * (1.0 - frac) ** cfg.poly_power


class Adam:
    """Standard bias-corrected Adam; moments keyed by parameter name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.step_count = 0

    def step(self, store, lr):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in store.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------

def load_split(data_dir, split):
    index = load_index(data_dir)
    records = [r for r in index["records"] if r["split"] == split]
    if not records:
        raise ValueError(f"dataset at {data_dir} has no {split!r} records")
    images = [load_record(data_dir, r) for r in records]
    return records, images


def _prior_cache(provider, images):
    return [extract_prior(provider, vi).tokens for vi, _, _ in images]


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def _checkpoint_tensors(net, adam):
    tensors = {name: p.data for name, p in net.store.params.items()}
    for name, buf in net.store.buffers.items():
        tensors["buffer:" + name] = buf
    for name, m in adam.m.items():
        tensors["adam.m:" + name] = m
        tensors["adam.v:" + name] = adam.v[name]
    return tensors


def save_training_state(net, adam, rng, step, cfg, path):
    meta = {
        "config": cfg.to_dict(),
        "step": step,
        "seed": cfg.seed,
        "adam_steps": adam.step_count,
        "rng_state": rng.bit_generator.state,
    }
    save_checkpoint(_checkpoint_tensors(net, adam), meta, path)


def materialize(net):
    """Register every parameter/buffer by running one eval-mode dummy forward."""
    cfg = net.cfg
    size = cfg.image_size
    vi = Tensor(np.zeros((size, size, 3)))
    ir = Tensor(np.zeros((size, size, 1)))
    sp = None
    if cfg.needs_prior:
        raw = Tensor(np.zeros((cfg.prior_tokens, cfg.prior_width)))
        sp = net.prepare_prior(raw)
    net.forward_t(vi, ir, sp, mode="eval")


def load_training_state(path):
    """Rebuild (net, adam, rng, step, cfg) from a checkpoint directory."""
    meta, tensors = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    net = FuseNet(cfg.model)
    materialize(net)
    assign_params(net.store, tensors)
    adam = Adam()
    adam.step_count = meta["adam_steps"]
    for name in net.store.params:
        mk, vk = "adam.m:" + name, "adam.v:" + name
        if mk in tensors:
            adam.m[name] = tensors[mk].astype(np.float32, copy=True)
            adam.v[name] = tensors[vk].astype(np.float32, copy=True)
    rng = np.random.default_rng(cfg.seed)
    rng.bit_generator.state = meta["rng_state"]
    return net, adam, rng, meta["step"], cfg


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _dump_diagnostics(out_dir, step, breakdown, net):
    norms = {name: float(np.abs(p.data).max()) for name, p in net.store.params.items()}
    payload = {"step": step, "loss": asdict(breakdown), "param_absmax": norms}
    (Path(out_dir) / "diagnostic.json").write_text(json.dumps(payload, indent=1))


def train(cfg, data_dir, out_dir, resume=None):
    """Train on the dataset's train split; returns a summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, images = load_split(data_dir, "train")
    provider = make_provider(cfg.provider)
    priors = _prior_cache(provider, images) if cfg.model.needs_prior else None

    if resume is not None:
        net, adam, rng, start_step, cfg = load_training_state(resume)
        log_mode = "a"
    else:
        net = FuseNet(cfg.model)
        adam = Adam()
        rng = np.random.default_rng(cfg.seed)
        start_step = 0
        log_mode = "w"

    n = len(images)
    log_path = out / "log.csv"
    first_loss = None
    last_loss = None
    with open(log_path, log_mode, newline="") as logf:
        writer = csv.writer(logf)
        if log_mode == "w":
            writer.writerow(["step", "lr", "l_inte", "l_color", "l_fusion"])
        for step in range(start_step, cfg.steps):
            lr = lr_schedule(step, cfg.steps, cfg)
            batch = rng.integers(0, n, size=cfg.batch_size)
            sums = np.zeros(3)
            with T.Tape():
                total = None
                for idx in batch:
                    vi, ir, clean = images[int(idx)]
                    sp = None
                    if priors is not None:
                        sp = net.prepare_prior(Tensor(priors[int(idx)]))
                    i_f, _, _ = net.forward_t(
                        Tensor(vi.pixels), Tensor(ir.pixels), sp, mode="train"
                    )
                    loss, br = fusion_loss(i_f, Tensor(clean.pixels), Tensor(ir.pixels))
                    sums += (br.l_inte, br.l_color, br.l_fusion)
                    total = loss if total is None else T.add(total, loss)
                total = T.mul(total, 1.0 / cfg.batch_size)
                if not np.isfinite(total.data):
                    _dump_diagnostics(out, step, br, net)
                    raise TrainingDiverged(f"non-finite loss at step {step}")
                T.backward(total)
            adam.step(net.store, lr)
            net.store.zero_grads()
            mean = sums / cfg.batch_size
            if first_loss is None:
                first_loss = mean[2]
            last_loss = mean[2]
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                writer.writerow([step, f"{lr:.8g}", f"{mean[0]:.6f}", f"{mean[1]:.6f}", f"{mean[2]:.6f}"])
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.steps:
                save_training_state(net, adam, rng, step + 1, cfg, out / f"ckpt-{step + 1:06d}")

    save_training_state(net, adam, rng, cfg.steps, cfg, out / "checkpoint")
    summary = {
        "steps": cfg.steps,
        "first_loss": first_loss,
        "last_loss": last_loss,
        "checkpoint": str(out / "checkpoint"),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


# ---------------------------------------------------------------------------
# post-training evaluation
# ---------------------------------------------------------------------------

def evaluate_model(net, provider, data_dir, split="test", fused_dir=None):
    """Mean held-out fusion loss, per-image metrics, and the routing report."""
    records, images = load_split(data_dir, split)
    losses = []
    weights = []
    reports = []
    baselines = []
    for rec, (vi, ir, clean) in zip(records, images):
        sp = None
        if net.cfg.needs_prior:
            raw = extract_prior(provider, vi)
            sp = net.prepare_prior(Tensor(raw.tokens))
        i_f, w, _ = net.forward_t(Tensor(vi.pixels), Tensor(ir.pixels), sp, mode="eval")
        fused = ImageBuffer.from_array(np.clip(i_f.data.astype(np.float64), 0.0, 1.0))
        _, br = fusion_loss(i_f, Tensor(clean.pixels), Tensor(ir.pixels))
        losses.append(br.l_fusion)
        weights.append(w.data.astype(np.float64))
        reports.append((rec, evaluate_fusion(fused, clean, ir, clean)))
        baselines.append((rec, psnr(vi, clean)))
        if fused_dir is not None:
            d = Path(fused_dir)
            d.mkdir(parents=True, exist_ok=True)
            write_image(fused, d / f"{rec['degradation']}_{rec['id']}.ppm")
    return {
        "mean_l_fusion": float(np.mean(losses)),
        "routing": dmoe_mod.routing_report(weights),
        "metrics": reports,
        "baseline_psnr": baselines,
    }


def dcam_inspection_rows(net, provider, data_dir, split="test", top_n=10):
    """CSV rows: per-image prototype scores, then per-prototype channel ranks."""
    if not net.cfg.use_dcam:
        raise ValueError("model was built without the channel-modulation path")
    records, images = load_split(data_dir, split)
    k = net.cfg.prototypes
    rows = [["image", "degradation"] + [f"s_{i}" for i in range(k)]]
    bank = net.store.params["dcam.proto"]
    last = None
    for rec, (vi, _, _) in zip(records, images):
        raw = extract_prior(provider, vi)
        sp = net.prepare_prior(Tensor(raw.tokens))
        s = dcam_mod.prototype_scores(net.store, sp, k)
        last = dcam_mod.decompose_report(s, bank, top_n=top_n)
        rows.append([rec["id"], rec["degradation"]] + [f"{v:.6f}" for v in s.data])
    for i, (act, sup) in enumerate(zip(last.activated, last.suppressed)):
        rows.append([f"prototype_{i}_activated"] + [str(c) for c in act])
        rows.append([f"prototype_{i}_suppressed"] + [str(c) for c in sup])
    return rows
