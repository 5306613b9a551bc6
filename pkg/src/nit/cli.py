"""Single command-line entry point: train / sample / pack-plan / verify / stats.

Every run writes a manifest (config hash, seed, package version) into its
output directory so it can be re-executed from the manifest alone. Exit
code is 0 iff all requested work succeeded.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .blocks import ModelConfig, NiTModel, load_checkpoint
from .diffusion import GuidanceConfig, SamplerConfig, euler_sample
from .harness import (
    DatasetSpec,
    TrainConfig,
    configs_from_mapping,
    eval_generalization,
    parse_config,
    parse_sizes,
    train,
)
from .packing import packing_efficiency, plan_packing
from .tokenizer import ToyCodec
from . import verify as verify_mod


def _write_manifest(out_dir: str, args: argparse.Namespace, extra: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = {k: v for k, v in vars(args).items() if k != "func"}
    blob = json.dumps(payload, sort_keys=True, default=str)
    manifest = {
        "command": args.command,
        "args": payload,
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
        "seed": getattr(args, "seed", None),
        "versions": {"nit": __version__, "numpy": np.__version__, "python": sys.version.split()[0]},
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)


def cmd_train(args) -> int:
    if args.config:
        with open(args.config) as fh:
            kv = parse_config(fh.read())
    else:
        kv = {}
    train_cfg, spec, model_kwargs = configs_from_mapping(kv)
    # Flags take precedence over config-file keys.
    if args.steps is not None:
        train_cfg.total_steps = args.steps
    if args.seed is not None:
        train_cfg.seed = args.seed
        spec.seed = args.seed
    if args.tokens_per_step is not None:
        train_cfg.tokens_per_step = args.tokens_per_step
    if args.learning_rate is not None:
        train_cfg.learning_rate = args.learning_rate

    downsample = model_kwargs.pop("downsample_factor", 8)
    codec = ToyCodec(downsample_factor=downsample)
    config = ModelConfig(
        in_channels=codec.latent_channels,
        num_classes=model_kwargs.pop("num_classes", spec.class_count),
        class_drop_prob=train_cfg.class_drop_prob,
        **model_kwargs,
    )
    model = NiTModel(config, seed=train_cfg.seed)

    os.makedirs(args.out, exist_ok=True)
    _write_manifest(args.out, args, {"train_config": vars(train_cfg), "dataset": vars(spec)})
    log = train(
        model,
        spec,
        train_cfg,
        codec=codec,
        log_path=os.path.join(args.out, "loss.csv"),
        checkpoint_path=os.path.join(args.out, "model.nitc"),
        progress=lambda step, loss: print(f"step {step}  loss {loss:.5f}"),
    )
    if log:
        print(f"final loss {log[-1][1]:.5f} after {log[-1][0]} steps")
    else:
        print("no training steps requested; wrote initial checkpoint")
    return 0


def cmd_sample(args) -> int:
    model = load_checkpoint(args.checkpoint)
    codec = ToyCodec(downsample_factor=args.downsample_factor)
    guidance = GuidanceConfig(
        scale=args.cfg_scale, t_lo=args.cfg_interval[0], t_hi=args.cfg_interval[1]
    )
    f = codec.downsample_factor * model.config.patch_size
    if args.height % f or args.width % f:
        print(f"error: size {args.height}x{args.width} not divisible by {f}", file=sys.stderr)
        return 1
    latent = euler_sample(
        model,
        (args.height // codec.downsample_factor, args.width // codec.downsample_factor),
        args.cls,
        SamplerConfig(num_steps=args.steps, seed=args.seed),
        guidance,
    )
    pixels = np.clip((codec.decode(latent) + 1.0) / 2.0, 0.0, 1.0)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    _write_manifest(out_dir, args)
    _write_image(args.out, pixels)
    print(f"wrote {args.out}")
    return 0


def _write_image(path: str, pixels: np.ndarray) -> None:
    arr = (pixels.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    if path.endswith(".ppm"):
        h, w, _ = arr.shape
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(arr.tobytes())
    else:
        from PIL import Image

        Image.fromarray(arr).save(path)


def cmd_pack_plan(args) -> int:
    with open(args.sizes) as fh:
        sizes = parse_sizes(",".join(line.strip() for line in fh if line.strip()))
    factor = args.downsample_factor * args.patch_size
    counts = []
    for h, w in sizes:
        if h % factor or w % factor:
            print(f"error: size {h}x{w} not divisible by {factor}", file=sys.stderr)
            return 1
        counts.append((h // factor) * (w // factor))
    plan = plan_packing(counts, args.budget)
    waste = packing_efficiency(plan, counts)
    for i, pack in enumerate(plan.packs):
        used = sum(counts[j] for j in pack)
        members = ",".join(str(j) for j in pack)
        print(f"pack\t{i}\t{members}\t{used}/{plan.max_len}")
    print(f"waste\t{waste:.4f}")
    return 0


def cmd_verify(args) -> int:
    results = verify_mod.run_all(seed=args.seed, inject_fault=args.inject_fault)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    _write_manifest(out_dir, args)
    csv_path = os.path.join(out_dir, "verify.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["suite", "passed", "seconds", "detail"])
        for r in results:
            writer.writerow([r.name, int(r.passed), f"{r.seconds:.3f}", json.dumps(r.detail)])
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name}  {r.detail}")
    print(f"report written to {csv_path}")
    return 1 if failed else 0


def cmd_stats(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, losses = [], []
    with open(args.log) as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
    if not steps:
        print("empty loss log", file=sys.stderr)
        return 1
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="token-budget training on synthetic data")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", default="runs/train", help="output directory")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tokens-per-step", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate one image from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--class", dest="cls", type=int, default=None)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--cfg-scale", type=float, default=1.0)
    p.add_argument("--cfg-interval", type=float, nargs=2, default=[0.0, 1.0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--downsample-factor", type=int, default=8)
    p.add_argument("--out", default="sample.png")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("pack-plan", help="plan packing for a list of HxW sizes")
    p.add_argument("sizes", help="file with one HxW size per line")
    p.add_argument("--budget", type=int, default=2048)
    p.add_argument("--downsample-factor", type=int, default=1)
    p.add_argument("--patch-size", type=int, default=1)
    p.set_defaults(func=cmd_pack_plan)

    p = sub.add_parser("verify", help="run the oracle/invariant suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/verify")
    p.add_argument("--inject-fault", action="store_true",
                   help="test hook: flip one attention sign to force a failure")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("stats", help="plot a training loss CSV")
    p.add_argument("log", help="loss.csv written by train")
    p.add_argument("--out", default="loss.png")
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
