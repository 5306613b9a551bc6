"""NiT transformer blocks with explicit reverse-mode backprop.

AdaLN-zero conditioned blocks over packed sequences, patch/timestep/class
embeddings, the final projection layer, and the LoRA-AdaLN text-to-image
block. No autodiff framework: every layer exposes a forward that caches
what its hand-written backward needs. Parameters live in a flat named
registry so checkpoints round-trip bitwise.

Layout conventions: packed hidden states are (total_tokens, dim); linear
weights are (in, out) applied as x @ W + b; conditioning vectors are one
row per instance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import (
    AttentionConfig,
    cross_attention,
    packed_varlen_attention,
    qk_normalize,
    segment_attention_backward,
    segment_attention_forward,
)
from .packing import PackedBatch
from .rope import RopeConfig, RopeTable, angle_grid, apply_rope, apply_rope_backward, base_frequencies
from .tokenizer import ShapeError

CHECKPOINT_MAGIC = b"NITC"
CHECKPOINT_VERSION = 1

LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    depth: int = 4
    num_heads: int = 4
    patch_size: int = 1
    in_channels: int = 192
    num_classes: int = 4
    mlp_ratio: float = 4.0
    qk_norm: bool = False
    rope_theta: float = 10000.0
    class_drop_prob: float = 0.1
    time_freq_dim: int = 256

    @property
    def token_dim(self) -> int:
        return self.in_channels * self.patch_size**2

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.dim, self.num_heads, qk_norm=self.qk_norm)


# NiT-tiny is the test/train workhorse; the B/XL presets are
# documented for reference, not exercised at desk scale.
def tiny_config(**overrides) -> ModelConfig:
    return replace(ModelConfig(dim=64, depth=4, num_heads=4), **overrides)


def base_config(**overrides) -> ModelConfig:
    return replace(ModelConfig(dim=768, depth=12, num_heads=12), **overrides)


def xl_config(**overrides) -> ModelConfig:
    return replace(ModelConfig(dim=1152, depth=28, num_heads=16), **overrides)


# ---------------------------------------------------------------------------
# Elementwise primitives.


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu_tanh(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t)


def gelu_tanh_forward(x):
    """GELU plus the tanh cache its backward reuses."""
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu_tanh_grad(x, t=None):
    if t is None:
        t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 0.134145 * (x * x))


def layer_norm_forward(x, eps=LN_EPS):
    """Non-affine layer norm over the last axis."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    return y, (y, inv)


def layer_norm_backward(dy, cache):
    y, inv = cache
    d = y.shape[-1]
    return inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Parameter registry.


def _xavier(rng, fan_in, fan_out, dtype=np.float32):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Flat named registry of all learnable weights, adaLN-zero initialized."""
    rng = np.random.default_rng(seed)
    d, hidden = config.dim, int(config.dim * config.mlp_ratio)
    p: dict[str, np.ndarray] = {}
    p["patch_embed.weight"] = _xavier(rng, config.token_dim, d)
    p["patch_embed.bias"] = np.zeros(d, dtype=np.float32)
    p["t_embed.fc1.weight"] = (0.02 * rng.standard_normal((config.time_freq_dim, d))).astype(np.float32)
    p["t_embed.fc1.bias"] = np.zeros(d, dtype=np.float32)
    p["t_embed.fc2.weight"] = (0.02 * rng.standard_normal((d, d))).astype(np.float32)
    p["t_embed.fc2.bias"] = np.zeros(d, dtype=np.float32)
    # Row num_classes is the learned null embedding used for CFG dropout.
    p["class_embed.table"] = (0.02 * rng.standard_normal((config.num_classes + 1, d))).astype(np.float32)
    for i in range(config.depth):
        pre = f"blocks.{i}."
        p[pre + "attn.qkv.weight"] = _xavier(rng, d, 3 * d)
        p[pre + "attn.qkv.bias"] = np.zeros(3 * d, dtype=np.float32)
        p[pre + "attn.proj.weight"] = _xavier(rng, d, d)
        p[pre + "attn.proj.bias"] = np.zeros(d, dtype=np.float32)
        p[pre + "mlp.fc1.weight"] = _xavier(rng, d, hidden)
        p[pre + "mlp.fc1.bias"] = np.zeros(hidden, dtype=np.float32)
        p[pre + "mlp.fc2.weight"] = _xavier(rng, hidden, d)
        p[pre + "mlp.fc2.bias"] = np.zeros(d, dtype=np.float32)
        p[pre + "adaln.weight"] = np.zeros((d, 6 * d), dtype=np.float32)
        p[pre + "adaln.bias"] = np.zeros(6 * d, dtype=np.float32)
    p["final.adaln.weight"] = np.zeros((d, 2 * d), dtype=np.float32)
    p["final.adaln.bias"] = np.zeros(2 * d, dtype=np.float32)
    p["final.linear.weight"] = np.zeros((d, config.token_dim), dtype=np.float32)
    p["final.linear.bias"] = np.zeros(config.token_dim, dtype=np.float32)
    return p


# ---------------------------------------------------------------------------
# Embeddings and conditioning.


def patch_embed(tokens: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine projection of token rows into the hidden dimension."""
    if tokens.shape[1] != weight.shape[0]:
        raise ShapeError(f"token dim {tokens.shape[1]} != embed in-dim {weight.shape[0]}")
    return tokens @ weight + bias


def sinusoidal_features(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of t in [0,1] (scaled by 1000)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * 1000.0
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def timestep_embedding(params: dict, t, config: ModelConfig) -> np.ndarray:
    """Sinusoidal features followed by a 2-layer SiLU MLP; deterministic."""
    emb, _ = _timestep_forward(params, np.atleast_1d(t), config)
    return emb


def _timestep_forward(params, t, config: ModelConfig):
    dtype = params["t_embed.fc1.weight"].dtype
    feats = sinusoidal_features(t, config.time_freq_dim).astype(dtype)
    h1 = feats @ params["t_embed.fc1.weight"] + params["t_embed.fc1.bias"]
    a1 = silu(h1)
    out = a1 @ params["t_embed.fc2.weight"] + params["t_embed.fc2.bias"]
    return out, (feats, h1, a1)


def _timestep_backward(dout, cache, params, grads):
    feats, h1, a1 = cache
    grads["t_embed.fc2.weight"] += a1.T @ dout
    grads["t_embed.fc2.bias"] += dout.sum(axis=0)
    da1 = dout @ params["t_embed.fc2.weight"].T
    dh1 = da1 * silu_grad(h1)
    grads["t_embed.fc1.weight"] += feats.T @ dh1
    grads["t_embed.fc1.bias"] += dh1.sum(axis=0)


def class_embedding(
    table: np.ndarray,
    label: int | None,
    drop_prob: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, int]:
    """Row lookup with CFG label dropout; returns (vector, index used).

    ``None`` or a dropped label selects the learned null row (last row).
    """
    null_idx = table.shape[0] - 1
    if label is None:
        return table[null_idx], null_idx
    if not 0 <= label < null_idx:
        raise ShapeError(f"class label {label} out of range [0, {null_idx})")
    if drop_prob > 0.0 and rng is not None and rng.random() < drop_prob:
        return table[null_idx], null_idx
    return table[label], label


def embed_condition(
    params: dict,
    config: ModelConfig,
    t: np.ndarray,
    labels,
    rng: np.random.Generator | None = None,
    train: bool = False,
):
    """Per-instance conditioning c_k = timestep embedding + class embedding."""
    t_emb, t_cache = _timestep_forward(params, np.asarray(t), config)
    table = params["class_embed.table"]
    drop = config.class_drop_prob if train else 0.0
    idxs = []
    rows = []
    for lab in labels:
        row, idx = class_embedding(table, lab, drop, rng)
        rows.append(row)
        idxs.append(idx)
    c = t_emb + np.stack(rows)
    return c, (t_cache, idxs)


def _condition_backward(dc, cache, params, grads):
    t_cache, idxs = cache
    _timestep_backward(dc, t_cache, params, grads)
    np.add.at(grads["class_embed.table"], idxs, dc)


# ---------------------------------------------------------------------------
# AdaLN and modulation.


def adaln_params(c: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """SiLU then affine, split into six per-instance d-vectors
    (shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp)."""
    a = silu(c)
    chunks = np.split(a @ weight + bias, 6, axis=-1)
    return tuple(chunks)


def packed_modulate(
    z_hat: np.ndarray, shift: np.ndarray, scale: np.ndarray, cu_seqlens: np.ndarray
) -> np.ndarray:
    """Per-instance x * (1 + scale) + shift, broadcast across each segment."""
    seg_lens = np.diff(cu_seqlens)
    scale_rows = np.repeat(scale, seg_lens, axis=0)
    shift_rows = np.repeat(shift, seg_lens, axis=0)
    return z_hat * (1.0 + scale_rows) + shift_rows


def _broadcast(per_instance: np.ndarray, seg_lens) -> np.ndarray:
    return np.repeat(per_instance, seg_lens, axis=0)


def _segment_sum(rows: np.ndarray, cu_seqlens: np.ndarray) -> np.ndarray:
    return np.add.reduceat(rows, cu_seqlens[:-1], axis=0)


def rope_table_for(hw_list, head_dim: int, theta: float, dtype=np.float32) -> RopeTable:
    """Rope table aligned to a packed layout given per-instance grids."""
    cfg = RopeConfig(head_dim=head_dim, theta=theta)
    omega = base_frequencies(cfg)
    phi = np.concatenate([angle_grid(gh, gw, omega) for gh, gw in hw_list], axis=0)
    cos = np.repeat(np.cos(phi), 2, axis=-1).astype(dtype)
    sin = np.repeat(np.sin(phi), 2, axis=-1).astype(dtype)
    return RopeTable(cos=cos, sin=sin)


# ---------------------------------------------------------------------------
# Self-attention sublayer (trainable, cached).


def _attn_forward(x, params, pre, config: ModelConfig, cu_seqlens, table: RopeTable):
    n, d = x.shape
    h, hd = config.num_heads, config.head_dim
    qkv = x @ params[pre + "attn.qkv.weight"] + params[pre + "attn.qkv.bias"]
    q, k, v = [a.reshape(n, h, hd) for a in np.split(qkv, 3, axis=-1)]

    qk_cache = None
    if config.qk_norm:
        qn, q_ln = layer_norm_forward(q)
        kn, k_ln = layer_norm_forward(k)
        qk_cache = (q_ln, k_ln)
        q, k = qn, kn

    cos = table.cos[:, None, :]
    sin = table.sin[:, None, :]
    qr = apply_rope(q, cos, sin)
    kr = apply_rope(k, cos, sin)

    out_h, attn_cache = segment_attention_forward(
        qr, kr, v, cu_seqlens, config.attention().scale
    )
    out = out_h.reshape(n, d) @ params[pre + "attn.proj.weight"] + params[pre + "attn.proj.bias"]
    cache = (x, qk_cache, cos, sin, attn_cache, out_h)
    return out, cache


def _attn_backward(dout, cache, params, pre, config: ModelConfig, grads):
    x, qk_cache, cos, sin, attn_cache, out_h = cache
    n, d = x.shape
    h, hd = config.num_heads, config.head_dim

    grads[pre + "attn.proj.weight"] += out_h.reshape(n, d).T @ dout
    grads[pre + "attn.proj.bias"] += dout.sum(axis=0)
    dout_h = (dout @ params[pre + "attn.proj.weight"].T).reshape(n, h, hd)

    dqr, dkr, dv = segment_attention_backward(dout_h, attn_cache)
    dq = apply_rope_backward(dqr, cos, sin)
    dk = apply_rope_backward(dkr, cos, sin)
    if config.qk_norm:
        q_ln, k_ln = qk_cache
        dq = layer_norm_backward(dq, q_ln)
        dk = layer_norm_backward(dk, k_ln)

    dqkv = np.concatenate(
        [dq.reshape(n, d), dk.reshape(n, d), dv.reshape(n, d)], axis=-1
    )
    grads[pre + "attn.qkv.weight"] += x.T @ dqkv
    grads[pre + "attn.qkv.bias"] += dqkv.sum(axis=0)
    return dqkv @ params[pre + "attn.qkv.weight"].T


# ---------------------------------------------------------------------------
# The NiT block.


def nit_block_forward(
    z: np.ndarray,
    c: np.ndarray,
    cu_seqlens: np.ndarray,
    table: RopeTable,
    params: dict,
    pre: str,
    config: ModelConfig,
):
    """adaLN-zero block: gated attention and MLP residual sublayers.

    z += gate_msa * Attn(modulate(LN(z))); z += gate_mlp * MLP(modulate(LN(z))).
    At init the adaLN projection is zero, so the block is the identity map.
    """
    seg_lens = np.diff(cu_seqlens)
    a = silu(c)
    mod = a @ params[pre + "adaln.weight"] + params[pre + "adaln.bias"]
    shift1, scale1, gate1, shift2, scale2, gate2 = np.split(mod, 6, axis=-1)

    h1, ln1 = layer_norm_forward(z)
    m1 = h1 * (1.0 + _broadcast(scale1, seg_lens)) + _broadcast(shift1, seg_lens)
    attn_out, attn_cache = _attn_forward(m1, params, pre, config, cu_seqlens, table)
    z1 = z + _broadcast(gate1, seg_lens) * attn_out

    h2, ln2 = layer_norm_forward(z1)
    m2 = h2 * (1.0 + _broadcast(scale2, seg_lens)) + _broadcast(shift2, seg_lens)
    f1 = m2 @ params[pre + "mlp.fc1.weight"] + params[pre + "mlp.fc1.bias"]
    g1, gelu_t = gelu_tanh_forward(f1)
    mlp_out = g1 @ params[pre + "mlp.fc2.weight"] + params[pre + "mlp.fc2.bias"]
    z2 = z1 + _broadcast(gate2, seg_lens) * mlp_out

    cache = (
        c, a, (shift1, scale1, gate1, shift2, scale2, gate2),
        h1, ln1, attn_out, attn_cache,
        h2, ln2, m2, (f1, gelu_t), g1, mlp_out, seg_lens,
    )
    return z2, cache


def nit_block_backward(dz2, cache, cu_seqlens, params, pre, config: ModelConfig, grads):
    """Returns (dz, dc) for the block input and its conditioning vector."""
    (
        c, a, mods,
        h1, ln1, attn_out, attn_cache,
        h2, ln2, m2, (f1, gelu_t), g1, mlp_out, seg_lens,
    ) = cache
    shift1, scale1, gate1, shift2, scale2, gate2 = mods

    # MLP sublayer.
    dgate2 = _segment_sum(dz2 * mlp_out, cu_seqlens)
    dmlp = dz2 * _broadcast(gate2, seg_lens)
    grads[pre + "mlp.fc2.weight"] += g1.T @ dmlp
    grads[pre + "mlp.fc2.bias"] += dmlp.sum(axis=0)
    dg1 = dmlp @ params[pre + "mlp.fc2.weight"].T
    df1 = dg1 * gelu_tanh_grad(f1, gelu_t)
    grads[pre + "mlp.fc1.weight"] += m2.T @ df1
    grads[pre + "mlp.fc1.bias"] += df1.sum(axis=0)
    dm2 = df1 @ params[pre + "mlp.fc1.weight"].T
    dscale2 = _segment_sum(dm2 * h2, cu_seqlens)
    dshift2 = _segment_sum(dm2, cu_seqlens)
    dh2 = dm2 * (1.0 + _broadcast(scale2, seg_lens))
    dz1 = dz2 + layer_norm_backward(dh2, ln2)

    # Attention sublayer.
    dgate1 = _segment_sum(dz1 * attn_out, cu_seqlens)
    dattn = dz1 * _broadcast(gate1, seg_lens)
    dm1 = _attn_backward(dattn, attn_cache, params, pre, config, grads)
    dscale1 = _segment_sum(dm1 * h1, cu_seqlens)
    dshift1 = _segment_sum(dm1, cu_seqlens)
    dh1 = dm1 * (1.0 + _broadcast(scale1, seg_lens))
    dz = dz1 + layer_norm_backward(dh1, ln1)

    dmod = np.concatenate([dshift1, dscale1, dgate1, dshift2, dscale2, dgate2], axis=-1)
    grads[pre + "adaln.weight"] += a.T @ dmod
    grads[pre + "adaln.bias"] += dmod.sum(axis=0)
    dc = (dmod @ params[pre + "adaln.weight"].T) * silu_grad(c)
    return dz, dc


# ---------------------------------------------------------------------------
# Final projection layer.


def final_layer_forward(z, c, cu_seqlens, params, config: ModelConfig):
    """modulate(LN(z)) then zero-initialized affine to token space."""
    seg_lens = np.diff(cu_seqlens)
    a = silu(c)
    mod = a @ params["final.adaln.weight"] + params["final.adaln.bias"]
    shift, scale = np.split(mod, 2, axis=-1)
    h, ln = layer_norm_forward(z)
    m = h * (1.0 + _broadcast(scale, seg_lens)) + _broadcast(shift, seg_lens)
    out = m @ params["final.linear.weight"] + params["final.linear.bias"]
    return out, (c, a, shift, scale, h, ln, m, seg_lens)


def final_layer_backward(dout, cache, cu_seqlens, params, grads):
    c, a, shift, scale, h, ln, m, seg_lens = cache
    grads["final.linear.weight"] += m.T @ dout
    grads["final.linear.bias"] += dout.sum(axis=0)
    dm = dout @ params["final.linear.weight"].T
    dscale = _segment_sum(dm * h, cu_seqlens)
    dshift = _segment_sum(dm, cu_seqlens)
    dh = dm * (1.0 + _broadcast(scale, seg_lens))
    dz = layer_norm_backward(dh, ln)
    dmod = np.concatenate([dshift, dscale], axis=-1)
    grads["final.adaln.weight"] += a.T @ dmod
    grads["final.adaln.bias"] += dmod.sum(axis=0)
    dc = (dmod @ params["final.adaln.weight"].T) * silu_grad(c)
    return dz, dc


def final_layer(z, c, cu_seqlens, params, config: ModelConfig) -> np.ndarray:
    out, _ = final_layer_forward(z, c, cu_seqlens, params, config)
    return out


# ---------------------------------------------------------------------------
# Full model.


class NiTModel:
    """Packed-sequence velocity predictor with hand-written backprop."""

    def __init__(self, config: ModelConfig, params: dict | None = None, seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params

    def forward(
        self,
        tokens: np.ndarray,
        cu_seqlens: np.ndarray,
        hw_list,
        t: np.ndarray,
        labels,
        rng: np.random.Generator | None = None,
        train: bool = False,
    ):
        """Velocity predictions (rows aligned with ``tokens``) plus cache.

        ``train=True`` enables CFG class dropout (needs ``rng``) and keeps
        the cache needed by :meth:`backward`.
        """
        cfg = self.config
        dtype = self.params["patch_embed.weight"].dtype
        tokens = np.ascontiguousarray(tokens, dtype=dtype)
        c, cond_cache = embed_condition(self.params, cfg, t, labels, rng, train)
        z = patch_embed(tokens, self.params["patch_embed.weight"], self.params["patch_embed.bias"])
        table = rope_table_for(hw_list, cfg.head_dim, cfg.rope_theta, dtype=dtype)
        block_caches = []
        for i in range(cfg.depth):
            z, cache = nit_block_forward(
                z, c, cu_seqlens, table, self.params, f"blocks.{i}.", cfg
            )
            block_caches.append(cache)
        out, final_cache = final_layer_forward(z, c, cu_seqlens, self.params, cfg)
        cache = (tokens, cu_seqlens, c, cond_cache, block_caches, final_cache) if train else None
        return out, cache

    def backward(self, dout: np.ndarray, cache) -> dict[str, np.ndarray]:
        """Parameter gradients for a forward pass run with ``train=True``."""
        cfg = self.config
        tokens, cu_seqlens, c, cond_cache, block_caches, final_cache = cache
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dz, dc = final_layer_backward(dout, final_cache, cu_seqlens, self.params, grads)
        for i in reversed(range(cfg.depth)):
            dz, dci = nit_block_backward(
                dz, block_caches[i], cu_seqlens, self.params, f"blocks.{i}.", cfg, grads
            )
            dc += dci
        grads["patch_embed.weight"] += tokens.T @ dz
        grads["patch_embed.bias"] += dz.sum(axis=0)
        _condition_backward(dc, cond_cache, self.params, grads)
        return grads

    def predict_velocity(self, batch: PackedBatch, labels=None) -> np.ndarray:
        """Inference-style forward over a packed batch."""
        out, _ = self.forward(
            batch.tokens,
            batch.cu_seqlens,
            batch.hw_list,
            batch.times,
            batch.labels if labels is None else labels,
        )
        return out

    def astype(self, dtype) -> "NiTModel":
        """Copy of the model with parameters cast to ``dtype``."""
        return NiTModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})


# ---------------------------------------------------------------------------
# LoRA-AdaLN and the text-to-image block (forward only; T2I training uses
# an external text encoder and is out of scope at desk scale).


def init_t2i_block_params(config: ModelConfig, rank: int, seed: int = 0) -> dict[str, np.ndarray]:
    """One T2I block: self-attn, cross-attn, MLP, and LoRA-AdaLN (9 chunks)."""
    if rank > config.dim:
        raise ShapeError(f"LoRA rank {rank} exceeds dim {config.dim}")
    rng = np.random.default_rng(seed)
    d, hidden = config.dim, int(config.dim * config.mlp_ratio)
    p: dict[str, np.ndarray] = {}
    p["attn.qkv.weight"] = _xavier(rng, d, 3 * d)
    p["attn.qkv.bias"] = np.zeros(3 * d, dtype=np.float32)
    p["attn.proj.weight"] = _xavier(rng, d, d)
    p["attn.proj.bias"] = np.zeros(d, dtype=np.float32)
    p["cross.q.weight"] = _xavier(rng, d, d)
    p["cross.q.bias"] = np.zeros(d, dtype=np.float32)
    p["cross.kv.weight"] = _xavier(rng, d, 2 * d)
    p["cross.kv.bias"] = np.zeros(2 * d, dtype=np.float32)
    p["cross.proj.weight"] = _xavier(rng, d, d)
    p["cross.proj.bias"] = np.zeros(d, dtype=np.float32)
    p["mlp.fc1.weight"] = _xavier(rng, d, hidden)
    p["mlp.fc1.bias"] = np.zeros(hidden, dtype=np.float32)
    p["mlp.fc2.weight"] = _xavier(rng, hidden, d)
    p["mlp.fc2.bias"] = np.zeros(d, dtype=np.float32)
    p["lora.w1"] = _xavier(rng, d, rank)
    p["lora.w2"] = np.zeros((rank, 9 * d), dtype=np.float32)
    p["lora.bias"] = np.zeros(9 * d, dtype=np.float32)
    return p


def lora_adaln_params(t_emb: np.ndarray, w1: np.ndarray, w2: np.ndarray, bias=None):
    """Low-rank projection of the time embedding into the 9-tuple
    [shift x3, scale x3, gate x3] for (self-attn, cross-attn, FFN).
    W2 is zero-initialized, so all nine chunks start at exactly zero."""
    s = t_emb @ w1 @ w2
    if bias is not None:
        s = s + bias
    return tuple(np.split(s, 9, axis=-1))


def t2i_block_forward(
    z: np.ndarray,
    t_emb: np.ndarray,
    context: np.ndarray,
    cu_seqlens: np.ndarray,
    ctx_cu_seqlens: np.ndarray,
    table: RopeTable,
    params: dict,
    config: ModelConfig,
) -> np.ndarray:
    """Three gated sublayers: self-attention (with RoPE), cross-attention
    to the paired context segment (no RoPE on context), and the FFN. The
    AdaLN conditions on the time embedding only, via LoRA."""
    seg_lens = np.diff(cu_seqlens)
    b1, b2, b3, g1, g2, g3, a1, a2, a3 = lora_adaln_params(
        t_emb, params["lora.w1"], params["lora.w2"], params["lora.bias"]
    )
    attn_cfg = config.attention()
    n, d = z.shape

    h, _ = layer_norm_forward(z)
    m = h * (1.0 + _broadcast(g1, seg_lens)) + _broadcast(b1, seg_lens)
    qkv = m @ params["attn.qkv.weight"] + params["attn.qkv.bias"]
    q, k, v = np.split(qkv, 3, axis=-1)
    q = apply_rope(_to3(q, config), table.cos[:, None, :], table.sin[:, None, :]).reshape(n, d)
    k = apply_rope(_to3(k, config), table.cos[:, None, :], table.sin[:, None, :]).reshape(n, d)
    attn = packed_varlen_attention(q, k, v, cu_seqlens, attn_cfg)
    attn = attn @ params["attn.proj.weight"] + params["attn.proj.bias"]
    z = z + _broadcast(a1, seg_lens) * attn

    h, _ = layer_norm_forward(z)
    m = h * (1.0 + _broadcast(g2, seg_lens)) + _broadcast(b2, seg_lens)
    q = m @ params["cross.q.weight"] + params["cross.q.bias"]
    kv = context @ params["cross.kv.weight"] + params["cross.kv.bias"]
    k, v = np.split(kv, 2, axis=-1)
    xattn = cross_attention(q, k, v, cu_seqlens, ctx_cu_seqlens, attn_cfg)
    xattn = xattn @ params["cross.proj.weight"] + params["cross.proj.bias"]
    z = z + _broadcast(a2, seg_lens) * xattn

    h, _ = layer_norm_forward(z)
    m = h * (1.0 + _broadcast(g3, seg_lens)) + _broadcast(b3, seg_lens)
    mlp = gelu_tanh(m @ params["mlp.fc1.weight"] + params["mlp.fc1.bias"])
    mlp = mlp @ params["mlp.fc2.weight"] + params["mlp.fc2.bias"]
    return z + _broadcast(a3, seg_lens) * mlp


def _to3(x, config: ModelConfig):
    return x.reshape(x.shape[0], config.num_heads, config.head_dim)


# ---------------------------------------------------------------------------
# Checkpoint format: magic + version + config block + named parameter table.


def save_checkpoint(path, model: NiTModel) -> None:
    cfg = model.config
    config_block = struct.pack(
        "<iiiiiifiddi",
        cfg.dim,
        cfg.depth,
        cfg.num_heads,
        cfg.patch_size,
        cfg.in_channels,
        cfg.num_classes,
        cfg.mlp_ratio,
        int(cfg.qk_norm),
        cfg.rope_theta,
        cfg.class_drop_prob,
        cfg.time_freq_dim,
    )
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(config_block)))
        fh.write(config_block)
        fh.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            arr = np.ascontiguousarray(model.params[name], dtype="<f4")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> NiTModel:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ShapeError("bad checkpoint magic")
        version, cfg_len = struct.unpack("<HI", fh.read(6))
        if version != CHECKPOINT_VERSION:
            raise ShapeError(f"unsupported checkpoint version {version}")
        vals = struct.unpack("<iiiiiifiddi", fh.read(cfg_len))
        config = ModelConfig(
            dim=vals[0],
            depth=vals[1],
            num_heads=vals[2],
            patch_size=vals[3],
            in_channels=vals[4],
            num_classes=vals[5],
            mlp_ratio=float(vals[6]),
            qk_norm=bool(vals[7]),
            rope_theta=vals[8],
            class_drop_prob=vals[9],
            time_freq_dim=vals[10],
        )
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if shape else 1
            params[name] = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape).copy()
    return NiTModel(config, params)
