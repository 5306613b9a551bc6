"""Flow matching: linear path, loss, logit-normal time, CFG, Euler sampler.

The forward process is x_t = (1-t)*x + t*eps with regression target
v = eps - x; sampling integrates dx/dt = v from t=1 (noise) down to t=0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tokenizer import LatentImage, ShapeError, unpatchify
from .packing import build_cu_seqlens


@dataclass
class TimeSampler:
    """Logit-normal time: t = sigma/(1+sigma), ln sigma ~ N(P_mean, P_std^2)."""

    p_mean: float = 0.0
    p_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.p_std < 0:
            raise ValueError(f"p_std must be non-negative, got {self.p_std}")
        self._rng = np.random.default_rng(self.seed)

    def sample(self, n: int = 1) -> np.ndarray:
        return sample_time(self, n, self._rng)


def sample_time(sampler: TimeSampler, n: int = 1, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw n times in (0,1) from the logit-normal distribution."""
    rng = sampler._rng if rng is None else rng
    log_sigma = rng.normal(sampler.p_mean, sampler.p_std, size=n)
    sigma = np.exp(log_sigma)
    return sigma / (1.0 + sigma)


@dataclass(frozen=True)
class GuidanceConfig:
    """CFG scale with an interval gate on t."""

    scale: float = 1.0
    t_lo: float = 0.0
    t_hi: float = 1.0

    def __post_init__(self):
        if self.scale < 1.0:
            raise ValueError(f"guidance scale must be >= 1, got {self.scale}")
        if not 0.0 <= self.t_lo <= self.t_hi <= 1.0:
            raise ValueError(f"bad guidance interval [{self.t_lo}, {self.t_hi}]")


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")


def add_noise(x: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    """Linear-path interpolation x' = (1-t)*x + t*eps."""
    if x.shape != eps.shape:
        raise ShapeError(f"data {x.shape} vs noise {eps.shape} shape mismatch")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    return (1.0 - t) * x + t * eps


def velocity_target(x: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """v = eps - x, the time derivative of the linear path."""
    if x.shape != eps.shape:
        raise ShapeError(f"data {x.shape} vs noise {eps.shape} shape mismatch")
    return eps - x


def fm_loss(pred: np.ndarray, target: np.ndarray, cu_seqlens: np.ndarray) -> float:
    """Mean squared error per instance, then mean over instances.

    Per-instance normalization keeps large images from dominating the
    objective inside a pack.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape} shape mismatch")
    n = len(cu_seqlens) - 1
    total = 0.0
    for k in range(n):
        s, e = int(cu_seqlens[k]), int(cu_seqlens[k + 1])
        diff = pred[s:e] - target[s:e]
        total += float(np.mean(diff * diff))
    return total / n


def fm_loss_grad(pred: np.ndarray, target: np.ndarray, cu_seqlens: np.ndarray) -> np.ndarray:
    """d(fm_loss)/d(pred), matching the per-instance reduction."""
    n = len(cu_seqlens) - 1
    grad = np.empty_like(pred)
    for k in range(n):
        s, e = int(cu_seqlens[k]), int(cu_seqlens[k + 1])
        grad[s:e] = 2.0 * (pred[s:e] - target[s:e]) / (pred[s:e].size * n)
    return grad


def cfg_velocity(v_cond: np.ndarray, v_uncond: np.ndarray, g: GuidanceConfig, t: float) -> np.ndarray:
    """Interval-gated classifier-free guidance.

    Inside [t_lo, t_hi]: v_uncond + scale*(v_cond - v_uncond); outside the
    interval the conditional velocity is returned unmodified (bit-identical).
    """
    if v_cond.shape != v_uncond.shape:
        raise ShapeError("cond/uncond velocity shape mismatch")
    if g.scale != 1.0 and g.t_lo <= t <= g.t_hi:
        return v_uncond + g.scale * (v_cond - v_uncond)
    return v_cond


def euler_sample(
    model,
    shape: tuple[int, int],
    label: int | None,
    sampler: SamplerConfig,
    guidance: GuidanceConfig = GuidanceConfig(),
) -> LatentImage:
    """Generate one latent at a native (h, w) by Euler integration.

    Starts from x ~ N(0, I) at t=1 and steps dt = 1/num_steps down to t=0
    using the (optionally guided) predicted velocity. Deterministic given
    the sampler seed.
    """
    cfg = model.config
    p = cfg.patch_size
    h, w = shape
    if h % p or w % p:
        raise ShapeError(f"shape {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    n_tokens = gh * gw
    rng = np.random.default_rng(sampler.seed)
    x = rng.standard_normal((n_tokens, cfg.token_dim)).astype(np.float32)
    cu = build_cu_seqlens([n_tokens])
    hw_list = [(gh, gw)]
    dt = 1.0 / sampler.num_steps
    use_guidance = guidance.scale != 1.0 and label is not None

    for k in range(sampler.num_steps, 0, -1):
        t = k * dt
        ts = np.array([t])
        v_cond, _ = model.forward(x, cu, hw_list, ts, [label])
        if use_guidance:
            v_uncond, _ = model.forward(x, cu, hw_list, ts, [None])
            v = cfg_velocity(v_cond, v_uncond, guidance, t)
        else:
            v = v_cond
        x = x - dt * v.astype(np.float32)

    return unpatchify(x, h, w, p, label=label)
