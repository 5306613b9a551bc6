"""Synthetic native-resolution training harness.

Classes are parametric patterns renderable at any resolution: the class id
fixes the dominant hue, gradient orientation, and blob count, so class
identity is measurable on generated images regardless of size. The
harness packs an epoch to a token budget, runs Adam training steps, and
evaluates resolution/aspect generalization by hue accuracy.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .blocks import NiTModel, save_checkpoint
from .diffusion import (
    GuidanceConfig,
    SamplerConfig,
    TimeSampler,
    add_noise,
    euler_sample,
    fm_loss,
    fm_loss_grad,
    velocity_target,
)
from .packing import PackedBatch, assemble_packed_batch, plan_packing, packing_efficiency
from .tokenizer import ToyCodec, patchify


class TrainingError(RuntimeError):
    """Raised when training goes non-finite."""


@dataclass
class DatasetSpec:
    """Resolution mixture for synthetic data.

    ``fixed_sizes`` are (h, w) pixel sizes sampled uniformly; when
    ``native`` is set, sizes are additionally drawn from a native range
    with bounded aspect ratio. Mirrors the three ablation mixtures:
    native only, native + fixed, fixed only.
    """

    class_count: int = 4
    fixed_sizes: list[tuple[int, int]] = field(default_factory=list)
    native: bool = True
    native_min: int = 32
    native_max: int = 128
    max_aspect: float = 3.0
    size_step: int = 8  # all sizes stay divisible by downsample*patch
    images_per_epoch: int = 64
    seed: int = 0

    def sample_size(self, rng: np.random.Generator) -> tuple[int, int]:
        pick_native = self.native and (not self.fixed_sizes or rng.random() < 0.5)
        if pick_native:
            while True:
                h = int(rng.integers(self.native_min, self.native_max + 1))
                w = int(rng.integers(self.native_min, self.native_max + 1))
                h -= h % self.size_step
                w -= w % self.size_step
                if h < self.size_step or w < self.size_step:
                    continue
                aspect = max(h, w) / min(h, w)
                if aspect <= self.max_aspect:
                    return h, w
        return self.fixed_sizes[int(rng.integers(len(self.fixed_sizes)))]


@dataclass
class TrainConfig:
    tokens_per_step: int = 2048
    total_steps: int = 2000
    learning_rate: float = 2e-3
    class_drop_prob: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    p_mean: float = 0.0
    p_std: float = 1.0


def class_hue(class_id: int, class_count: int) -> float:
    """Dominant hue of a class in degrees; class 0 is hue 0 (red)."""
    return 360.0 * class_id / class_count


def synth_image(
    class_id: int, h: int, w: int, seed: int, class_count: int = 4
) -> np.ndarray:
    """Deterministic (3, h, w) float render in [0, 1].

    Class statistics (dominant hue, gradient orientation, blob count) are
    resolution-invariant: everything is drawn in relative coordinates.
    """
    rng = np.random.default_rng((seed, class_id))
    hue = class_hue(class_id, class_count) / 360.0
    angle = np.pi * class_id / class_count
    n_blobs = 1 + class_id % 3

    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    yy, xx = np.meshgrid(ys, xs, indexing="ij")

    ramp = np.cos(angle) * xx + np.sin(angle) * yy  # gradient along class axis
    value = 0.55 + 0.35 * (ramp - ramp.min()) / max(float(np.ptp(ramp)), 1e-9)
    for _ in range(n_blobs):
        cy, cx = rng.random(2)
        r = 0.08 + 0.12 * rng.random()
        sign = 1.0 if rng.random() < 0.5 else -1.0
        value += sign * 0.25 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2))
    value = np.clip(value, 0.05, 1.0)

    hsv = np.stack([np.full((h, w), hue), np.full((h, w), 0.85), value], axis=-1)
    return hsv_to_rgb(hsv).transpose(2, 0, 1).astype(np.float32)


def dominant_hue(image: np.ndarray) -> float:
    """Saturation-weighted circular mean hue of a (3, h, w) image, degrees."""
    hsv = rgb_to_hsv(np.clip(image, 0.0, 1.0).transpose(1, 2, 0))
    hue = hsv[..., 0] * 2 * np.pi
    weight = hsv[..., 1] * hsv[..., 2] + 1e-9
    mean = np.arctan2((np.sin(hue) * weight).sum(), (np.cos(hue) * weight).sum())
    return float(np.degrees(mean) % 360.0)


def hue_to_class(hue_deg: float, class_count: int) -> int:
    """Nearest class under circular hue distance."""
    hues = np.array([class_hue(c, class_count) for c in range(class_count)])
    dist = np.abs((hue_deg - hues + 180.0) % 360.0 - 180.0)
    return int(np.argmin(dist))


def make_epoch(
    spec: DatasetSpec,
    codec: ToyCodec,
    cfg: TrainConfig,
    epoch: int = 0,
):
    """Yield (noisy PackedBatch, velocity targets, waste) per pack.

    Every instance appears exactly once per epoch; sizes, classes, times,
    and noise are all drawn from the epoch-seeded generator.
    """
    rng = np.random.default_rng((spec.seed, cfg.seed, epoch))
    time_sampler = TimeSampler(cfg.p_mean, cfg.p_std, seed=int(rng.integers(2**31)))

    mats, labels, counts = [], [], []
    for i in range(spec.images_per_epoch):
        h, w = spec.sample_size(rng)
        label = int(rng.integers(spec.class_count))
        img = synth_image(label, h, w, seed=int(rng.integers(2**31)), class_count=spec.class_count)
        latent = codec.encode(img * 2.0 - 1.0, label=label)
        mat = patchify(latent)
        mats.append(mat)
        labels.append(label)
        counts.append(mat.tokens.shape[0])

    plan = plan_packing(counts, cfg.tokens_per_step)
    waste = packing_efficiency(plan, counts)
    times = time_sampler.sample(len(mats))
    for pack in plan.packs:
        batch = assemble_packed_batch(mats, pack, labels=labels, times=times)
        eps = rng.standard_normal(batch.tokens.shape).astype(np.float32)
        noisy = np.empty_like(batch.tokens)
        targets = velocity_target(batch.tokens, eps)
        for k, (s, e) in enumerate(batch.segments()):
            noisy[s:e] = add_noise(batch.tokens[s:e], eps[s:e], batch.times[k])
        batch.tokens = noisy
        yield batch, targets, waste


@dataclass
class AdamState:
    """Adam moments, beta = (0.9, 0.999)."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        if lr == 0.0:
            return
        self.step += 1
        bc1 = 1.0 - self.beta1**self.step
        bc2 = 1.0 - self.beta2**self.step
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p -= (lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)).astype(p.dtype)


def train_step(
    model: NiTModel,
    opt: AdamState,
    batch: PackedBatch,
    targets: np.ndarray,
    lr: float,
    rng: np.random.Generator,
) -> float:
    """One optimizer step: forward, fm_loss, backward, Adam update."""
    pred, cache = model.forward(
        batch.tokens, batch.cu_seqlens, batch.hw_list, batch.times, batch.labels,
        rng=rng, train=True,
    )
    loss = fm_loss(pred, targets, batch.cu_seqlens)
    if not np.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {loss} at optimizer step {opt.step} "
            f"(pack of {batch.num_instances} instances, {batch.tokens.shape[0]} tokens)"
        )
    grads = model.backward(fm_loss_grad(pred, targets, batch.cu_seqlens), cache)
    opt.update(model.params, grads, lr)
    return loss


def atomic_save_checkpoint(path: str, model: NiTModel) -> None:
    """Write to a temp file in the target directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    os.close(fd)
    try:
        save_checkpoint(tmp, model)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def train(
    model: NiTModel,
    spec: DatasetSpec,
    cfg: TrainConfig,
    codec: ToyCodec | None = None,
    log_path: str | None = None,
    checkpoint_path: str | None = None,
    log_every: int = 50,
    progress=None,
) -> list[tuple[int, float, float, int]]:
    """Token-budget training loop.

    Streams epochs of packed batches until ``total_steps`` optimizer steps
    have run. Returns the loss log as (step, loss, waste, tokens) rows and
    optionally writes them as CSV plus periodic checkpoints.
    """
    codec = codec or ToyCodec()
    opt = AdamState.for_params(model.params)
    drop_rng = np.random.default_rng((cfg.seed, 0xD20))
    log: list[tuple[int, float, float, int]] = []
    step = 0
    epoch = 0
    while step < cfg.total_steps:
        for batch, targets, waste in make_epoch(spec, codec, cfg, epoch):
            loss = train_step(model, opt, batch, targets, cfg.learning_rate, drop_rng)
            step += 1
            log.append((step, loss, waste, int(batch.tokens.shape[0])))
            if progress and (step % log_every == 0 or step == 1):
                progress(step, loss)
            if checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                atomic_save_checkpoint(checkpoint_path, model)
            if step >= cfg.total_steps:
                break
        epoch += 1
    if checkpoint_path:
        atomic_save_checkpoint(checkpoint_path, model)
    if log_path:
        write_loss_log(log_path, log)
    return log


def write_loss_log(path: str, log) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "waste", "tokens"])
        writer.writerows(log)


def eval_generalization(
    model: NiTModel,
    resolutions: list[tuple[int, int]],
    codec: ToyCodec,
    n_samples: int = 16,
    num_steps: int = 50,
    guidance: GuidanceConfig = GuidanceConfig(),
    class_count: int | None = None,
    seed: int = 0,
) -> dict:
    """Sample at each (h, w) pixel size and report class hue accuracy plus
    pixel-statistic distance to the generator's ground truth."""
    class_count = class_count or model.config.num_classes
    report = {"resolutions": []}
    for h, w in resolutions:
        lh, lw = h // codec.downsample_factor, w // codec.downsample_factor
        correct = 0
        stat_dist = []
        for i in range(n_samples):
            label = i % class_count
            latent = euler_sample(
                model, (lh, lw), label,
                SamplerConfig(num_steps=num_steps, seed=(seed, h, w, i).__hash__() & 0x7FFFFFFF),
                guidance,
            )
            pixels = np.clip((codec.decode(latent) + 1.0) / 2.0, 0.0, 1.0)
            if hue_to_class(dominant_hue(pixels), class_count) == label:
                correct += 1
            ref = synth_image(label, h, w, seed=i, class_count=class_count)
            stat_dist.append(
                float(np.abs(pixels.mean(axis=(1, 2)) - ref.mean(axis=(1, 2))).mean())
            )
        report["resolutions"].append(
            {
                "height": h,
                "width": w,
                "hue_accuracy": correct / n_samples,
                "pixel_stat_distance": float(np.mean(stat_dist)),
            }
        )
    return report


# ---------------------------------------------------------------------------
# key=value config files (documented keys for TrainConfig / DatasetSpec).

TRAIN_KEYS = {
    "tokens_per_step": int,
    "total_steps": int,
    "learning_rate": float,
    "class_drop_prob": float,
    "seed": int,
    "checkpoint_every": int,
    "p_mean": float,
    "p_std": float,
}

DATASET_KEYS = {
    "class_count": int,
    "fixed_sizes": str,  # e.g. "64x64,128x128"
    "native": lambda s: s.lower() in ("1", "true", "yes"),
    "native_min": int,
    "native_max": int,
    "max_aspect": float,
    "size_step": int,
    "images_per_epoch": int,
    "dataset_seed": int,
}

MODEL_KEYS = {
    "dim": int,
    "depth": int,
    "num_heads": int,
    "patch_size": int,
    "num_classes": int,
    "qk_norm": lambda s: s.lower() in ("1", "true", "yes"),
    "downsample_factor": int,
}


def parse_config(text: str) -> dict[str, str]:
    """Parse key=value lines; '#' starts a comment; unknown keys rejected."""
    known = set(TRAIN_KEYS) | set(DATASET_KEYS) | set(MODEL_KEYS)
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def parse_sizes(value: str) -> list[tuple[int, int]]:
    sizes = []
    for part in value.split(","):
        part = part.strip()
        if not part:
            continue
        h, w = part.lower().split("x")
        sizes.append((int(h), int(w)))
    return sizes


def configs_from_mapping(kv: dict[str, str]) -> tuple[TrainConfig, DatasetSpec, dict]:
    """Build (TrainConfig, DatasetSpec, model kwargs) from parsed keys."""
    tc = TrainConfig()
    for key, conv in TRAIN_KEYS.items():
        if key in kv:
            setattr(tc, key, conv(kv[key]))
    ds = DatasetSpec()
    for key, conv in DATASET_KEYS.items():
        if key in kv:
            attr = "seed" if key == "dataset_seed" else key
            val = parse_sizes(kv[key]) if key == "fixed_sizes" else conv(kv[key])
            setattr(ds, attr, val)
    model_kwargs = {
        key: conv(kv[key]) for key, conv in MODEL_KEYS.items() if key in kv
    }
    return tc, ds, model_kwargs
