"""Batch command-line interface.

Subcommands: synth, train, fuse, eval, gradcheck, inspect-routing,
inspect-dcam. Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .degrade import load_index, load_record, synth_dataset, toy_pair
from .gradsuite import run_gradient_suite
from .imageio import read_image, write_image
from .metrics import evaluate_fusion
from .prior import extract_prior, make_provider
from .tensor import Tensor
from .train import (
    PRESETS,
    TrainConfig,
    dcam_inspection_rows,
    evaluate_model,
    load_training_state,
    train,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="mdfuse", description="degradation-aware infrared/visible fusion")
    sub = p.add_subparsers(dest="command", metavar="command")

    sp = sub.add_parser("synth", help="generate a degraded toy dataset")
    sp.add_argument("--out", required=True, help="dataset directory")
    sp.add_argument("--pairs", type=int, default=40, help="clean pairs (x3 degradations)")
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--severity", choices=("light", "medium", "heavy"), default="medium")
    sp.add_argument("--split-ratio", type=float, default=0.75)

    tp = sub.add_parser("train", help="train on a synthesized dataset")
    tp.add_argument("--config", help="TrainConfig JSON")
    tp.add_argument("--preset", choices=sorted(PRESETS), help="hyperparameter preset")
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--seed", type=int, help="override config seed")
    tp.add_argument("--steps", type=int, help="override step count")
    tp.add_argument("--resume", help="checkpoint directory to resume from")

    fp = sub.add_parser("fuse", help="fuse one image pair with a checkpoint")
    fp.add_argument("--ckpt", required=True)
    fp.add_argument("--vi", required=True, help="visible PPM")
    fp.add_argument("--ir", required=True, help="infrared PGM")
    fp.add_argument("--out", required=True, help="output PPM")

    ep = sub.add_parser("eval", help="score fused images against a dataset split")
    ep.add_argument("--pred", required=True, help="dir of {degradation}_{id}.ppm files")
    ep.add_argument("--ref", required=True, help="dataset directory")
    ep.add_argument("--split", default="test")
    ep.add_argument("--out", help="report directory (default: --pred)")

    gp = sub.add_parser("gradcheck", help="run the gradient suite")
    gp.add_argument("--skip-full-net", action="store_true")

    rp = sub.add_parser("inspect-routing", help="export expert usage CSV")
    rp.add_argument("--ckpt", required=True)
    rp.add_argument("--data", required=True)
    rp.add_argument("--split", default="test")
    rp.add_argument("--out", required=True, help="CSV path")

    dp = sub.add_parser("inspect-dcam", help="export prototype score CSV")
    dp.add_argument("--ckpt", required=True)
    dp.add_argument("--data", required=True)
    dp.add_argument("--split", default="test")
    dp.add_argument("--out", required=True, help="CSV path")
    dp.add_argument("--top-n", type=int, default=10)
    return p


def _cmd_synth(args):
    pairs = [toy_pair(args.size, args.seed * 100003 + i) for i in range(args.pairs)]
    index = synth_dataset(pairs, args.out, split_ratio=args.split_ratio,
                          seed=args.seed, severity=args.severity)
    print(f"wrote {len(index['records'])} degraded pairs to {args.out}")
    return 0


def _load_train_config(args):
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    cfg = TrainConfig.from_dict(base)
    if args.preset:
        for key, val in PRESETS[args.preset].items():
            setattr(cfg, key, val)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.model.init_seed = args.seed
    if args.steps is not None:
        cfg.steps = args.steps
    return cfg


def _cmd_train(args):
    cfg = _load_train_config(args)
    summary = train(cfg, args.data, args.out, resume=args.resume)
    print(json.dumps({k: (float(v) if isinstance(v, (int, float, np.floating)) else v)
                      for k, v in summary.items()}))
    return 0


def _cmd_fuse(args):
    net, _, _, _, cfg = load_training_state(args.ckpt)
    provider = make_provider(cfg.provider)
    vi = read_image(args.vi)
    ir = read_image(args.ir)
    sp = None
    if net.cfg.needs_prior:
        raw = extract_prior(provider, vi)
        sp = net.prepare_prior(Tensor(raw.tokens))
    fused = net.forward(vi, ir, sp)
    write_image(fused, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args):
    index = load_index(args.ref)
    records = [r for r in index["records"] if r["split"] == args.split]
    if not records:
        raise ValueError(f"no {args.split!r} records in {args.ref}")
    pred = Path(args.pred)
    out_dir = Path(args.out) if args.out else pred
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [["id", "degradation", "psnr", "ssim", "nabf", "mi"]]
    agg = {"psnr": [], "ssim": [], "nabf": [], "mi": []}
    for rec in records:
        fused_path = pred / f"{rec['degradation']}_{rec['id']}.ppm"
        fused = read_image(fused_path)
        _, ir, clean = load_record(args.ref, rec)
        rep = evaluate_fusion(fused, clean, ir, clean)
        rows.append([rec["id"], rec["degradation"], f"{rep.psnr:.4f}", f"{rep.ssim:.4f}",
                     f"{rep.nabf:.5f}", f"{rep.mi:.4f}"])
        for key in agg:
            agg[key].append(getattr(rep, key))
    report = {k: float(np.mean(v)) for k, v in agg.items()}
    with open(out_dir / "per_image.csv", "w", newline="") as f:
        csv.writer(f).writerows(rows)
    (out_dir / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    print(json.dumps(report))
    return 0


def _cmd_gradcheck(args):
    results = run_gradient_suite(include_full_net=not args.skip_full_net)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"[{status}] {r.name}: max rel error {r.error:.3e} (tol {r.tolerance:g})")
    return 0 if ok else 2


def _cmd_inspect_routing(args):
    net, _, _, _, cfg = load_training_state(args.ckpt)
    provider = make_provider(cfg.provider)
    ev = evaluate_model(net, provider, args.data, split=args.split)
    with open(args.out, "w", newline="") as f:
        csv.writer(f).writerows(ev["routing"].rows())
    print(f"wrote {args.out} (entropy {ev['routing'].entropy_nats:.3f} nats)")
    return 0


def _cmd_inspect_dcam(args):
    net, _, _, _, cfg = load_training_state(args.ckpt)
    provider = make_provider(cfg.provider)
    rows = dcam_inspection_rows(net, provider, args.data, split=args.split, top_n=args.top_n)
    with open(args.out, "w", newline="") as f:
        csv.writer(f).writerows(rows)
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "fuse": _cmd_fuse,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "inspect-routing": _cmd_inspect_routing,
    "inspect-dcam": _cmd_inspect_dcam,
}


def cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # runtime failure -> exit 2
        print(f"error: {e}", file=sys.stderr)
        return 2


def main():
    raise SystemExit(cli())
