"""Block-diagonal multi-head attention over packed sequences.

Two self-attention routes: a dense explicitly-masked reference oracle, and
a segment-streaming implementation that walks cu_seqlens and never
materializes the cross-instance mask (tiled online softmax with float64
accumulators). Cross-attention pairs each image segment with one context
segment. A cached per-segment forward/backward core supports training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tokenizer import ShapeError


class AttentionError(ValueError):
    """Raised for invalid attention inputs (NaN, bad offsets)."""


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int
    qk_norm: bool = False
    tile_size: int = 64
    attn_drop: float = 0.0
    proj_drop: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ShapeError(
                f"model_dim {self.model_dim} not divisible by {self.num_heads} heads"
            )
        if self.head_dim % 4:
            raise ShapeError(f"head_dim {self.head_dim} must be divisible by 4")
        if self.attn_drop or self.proj_drop:
            # Dropout fields exist for config parity; training runs rate 0.
            raise NotImplementedError("nonzero attention dropout is not supported")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def scale(self) -> float:
        return self.head_dim**-0.5


def _check_inputs(*arrays: np.ndarray) -> None:
    for a in arrays:
        if np.isnan(a).any():
            raise AttentionError("NaN in attention inputs")


def _check_cu_seqlens(cu_seqlens: np.ndarray, total: int) -> None:
    cu = np.asarray(cu_seqlens)
    if cu[0] != 0 or cu[-1] != total:
        raise AttentionError(f"cu_seqlens {cu} inconsistent with {total} rows")
    if np.any(np.diff(cu) <= 0):
        raise AttentionError(f"cu_seqlens {cu} contains an empty segment")


def _to_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, num_heads, d // num_heads)


def qk_normalize(x: np.ndarray, enabled: bool = True, eps: float = 1e-6) -> np.ndarray:
    """Per-head layer norm over head_dim without learned affine."""
    if not enabled:
        return x
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def reference_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    cu_seqlens: np.ndarray,
    config: AttentionConfig,
) -> np.ndarray:
    """Dense masked oracle: softmax(scale*QK^T + M)V with block-diagonal M.

    The mask is 0 within an instance and -inf across instances; softmax is
    stabilized by subtracting the row max.
    """
    _check_inputs(q, k, v)
    total = q.shape[0]
    _check_cu_seqlens(cu_seqlens, total)
    qh = _to_heads(q, config.num_heads)
    kh = _to_heads(k, config.num_heads)
    vh = _to_heads(v, config.num_heads)

    seg_id = np.zeros(total, dtype=np.int64)
    for s, start in enumerate(cu_seqlens[:-1]):
        seg_id[start:] = s
    mask = np.where(seg_id[:, None] == seg_id[None, :], 0.0, -np.inf)

    qt, kt, vt = (a.transpose(1, 0, 2) for a in (qh, kh, vh))
    logits = config.scale * (qt @ kt.transpose(0, 2, 1)) + mask[None, :, :]
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = (weights @ vt).transpose(1, 0, 2)
    return out.reshape(total, config.model_dim).astype(q.dtype)


def packed_varlen_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    cu_seqlens: np.ndarray,
    config: AttentionConfig,
) -> np.ndarray:
    """Segment-streaming attention; no mask is ever materialized.

    Iterates instance segments via cu_seqlens; within a segment runs a
    tiled online softmax (running max and running denominator over key
    tiles) so peak memory is O(segment_len * tile + head_dim). Accumulates
    in float64, returns the input dtype.
    """
    _check_inputs(q, k, v)
    total = q.shape[0]
    _check_cu_seqlens(cu_seqlens, total)
    qh = _to_heads(q, config.num_heads).astype(np.float64)
    kh = _to_heads(k, config.num_heads).astype(np.float64)
    vh = _to_heads(v, config.num_heads).astype(np.float64)
    out = np.empty_like(qh)
    tile = config.tile_size

    for s in range(len(cu_seqlens) - 1):
        start, end = int(cu_seqlens[s]), int(cu_seqlens[s + 1])
        qs, ks, vs = qh[start:end], kh[start:end], vh[start:end]
        n = end - start
        m = np.full((n, config.num_heads), -np.inf)
        denom = np.zeros((n, config.num_heads))
        acc = np.zeros_like(qs)
        qt = qs.transpose(1, 0, 2)  # (h, n, hd)
        for j0 in range(0, n, tile):
            j1 = min(j0 + tile, n)
            kt = ks[j0:j1].transpose(1, 2, 0)  # (h, hd, tile)
            logits = (config.scale * (qt @ kt)).transpose(1, 0, 2)  # (n, h, tile)
            m_new = np.maximum(m, logits.max(axis=-1))
            correction = np.exp(m - m_new)
            p = np.exp(logits - m_new[:, :, None])
            denom = denom * correction + p.sum(axis=-1)
            pv = (p.transpose(1, 0, 2) @ vs[j0:j1].transpose(1, 0, 2)).transpose(1, 0, 2)
            acc = acc * correction[:, :, None] + pv
            m = m_new
        out[start:end] = acc / denom[:, :, None]
    return out.reshape(total, config.model_dim).astype(q.dtype)


def reference_cross_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    q_cu_seqlens: np.ndarray,
    kv_cu_seqlens: np.ndarray,
    config: AttentionConfig,
) -> np.ndarray:
    """Explicit-mask cross-attention oracle over paired segments."""
    _check_inputs(q, k, v)
    _check_cu_seqlens(q_cu_seqlens, q.shape[0])
    _check_cu_seqlens(kv_cu_seqlens, k.shape[0])
    if len(q_cu_seqlens) != len(kv_cu_seqlens):
        raise AttentionError(
            f"{len(q_cu_seqlens) - 1} query segments vs "
            f"{len(kv_cu_seqlens) - 1} context segments"
        )
    qh = _to_heads(q, config.num_heads)
    kh = _to_heads(k, config.num_heads)
    vh = _to_heads(v, config.num_heads)

    q_seg = np.zeros(q.shape[0], dtype=np.int64)
    kv_seg = np.zeros(k.shape[0], dtype=np.int64)
    for s, start in enumerate(q_cu_seqlens[:-1]):
        q_seg[start:] = s
    for s, start in enumerate(kv_cu_seqlens[:-1]):
        kv_seg[start:] = s
    mask = np.where(q_seg[:, None] == kv_seg[None, :], 0.0, -np.inf)

    qt, kt, vt = (a.transpose(1, 0, 2) for a in (qh, kh, vh))
    logits = config.scale * (qt @ kt.transpose(0, 2, 1)) + mask[None, :, :]
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = (weights @ vt).transpose(1, 0, 2)
    return out.reshape(q.shape[0], config.model_dim).astype(q.dtype)


def cross_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    q_cu_seqlens: np.ndarray,
    kv_cu_seqlens: np.ndarray,
    config: AttentionConfig,
) -> np.ndarray:
    """Per-pair cross-attention: queries of segment i attend only to
    keys/values of context segment i. No RoPE is applied to context."""
    _check_inputs(q, k, v)
    _check_cu_seqlens(q_cu_seqlens, q.shape[0])
    _check_cu_seqlens(kv_cu_seqlens, k.shape[0])
    if len(q_cu_seqlens) != len(kv_cu_seqlens):
        raise AttentionError("each image instance needs exactly one context segment")
    qh = _to_heads(q, config.num_heads).astype(np.float64)
    kh = _to_heads(k, config.num_heads).astype(np.float64)
    vh = _to_heads(v, config.num_heads).astype(np.float64)
    out = np.empty_like(qh)
    for s in range(len(q_cu_seqlens) - 1):
        qs = qh[q_cu_seqlens[s] : q_cu_seqlens[s + 1]]
        ks = kh[kv_cu_seqlens[s] : kv_cu_seqlens[s + 1]]
        vs = vh[kv_cu_seqlens[s] : kv_cu_seqlens[s + 1]]
        qt, kt, vt = (a.transpose(1, 0, 2) for a in (qs, ks, vs))
        logits = config.scale * (qt @ kt.transpose(0, 2, 1))
        logits -= logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=-1, keepdims=True)
        out[q_cu_seqlens[s] : q_cu_seqlens[s + 1]] = (p @ vt).transpose(1, 0, 2)
    return out.reshape(q.shape[0], config.model_dim).astype(q.dtype)


# ---------------------------------------------------------------------------
# Cached forward/backward core used by the trainable blocks.


def segment_attention_forward(
    qh: np.ndarray,
    kh: np.ndarray,
    vh: np.ndarray,
    cu_seqlens: np.ndarray,
    scale: float,
    kv_cu_seqlens: np.ndarray | None = None,
):
    """Per-segment softmax attention on (T, H, hd) arrays, caching the
    attention weights for backward. Self-attention when kv_cu_seqlens is
    None, otherwise paired cross-attention."""
    kv_cu = cu_seqlens if kv_cu_seqlens is None else kv_cu_seqlens
    out = np.empty_like(qh)
    probs = []
    for s in range(len(cu_seqlens) - 1):
        q0, q1 = int(cu_seqlens[s]), int(cu_seqlens[s + 1])
        k0, k1 = int(kv_cu[s]), int(kv_cu[s + 1])
        qs = qh[q0:q1].transpose(1, 0, 2)  # (h, n, hd)
        ks = kh[k0:k1].transpose(1, 0, 2)
        vs = vh[k0:k1].transpose(1, 0, 2)
        logits = scale * (qs @ ks.transpose(0, 2, 1))
        logits -= logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=-1, keepdims=True)
        out[q0:q1] = (p @ vs).transpose(1, 0, 2)
        probs.append(p)
    cache = (qh, kh, vh, cu_seqlens, kv_cu, scale, probs)
    return out, cache


def segment_attention_backward(grad_out: np.ndarray, cache):
    """Gradients of :func:`segment_attention_forward` w.r.t. q, k, v."""
    qh, kh, vh, cu_seqlens, kv_cu, scale, probs = cache
    dq = np.zeros_like(qh)
    dk = np.zeros_like(kh)
    dv = np.zeros_like(vh)
    for s in range(len(cu_seqlens) - 1):
        q0, q1 = int(cu_seqlens[s]), int(cu_seqlens[s + 1])
        k0, k1 = int(kv_cu[s]), int(kv_cu[s + 1])
        p = probs[s]  # (h, nq, nk)
        go = grad_out[q0:q1].transpose(1, 0, 2)  # (h, nq, hd)
        vs = vh[k0:k1].transpose(1, 0, 2)
        dv[k0:k1] = (p.transpose(0, 2, 1) @ go).transpose(1, 0, 2)
        dp = go @ vs.transpose(0, 2, 1)
        dlogits = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq[q0:q1] = scale * (dlogits @ kh[k0:k1].transpose(1, 0, 2)).transpose(1, 0, 2)
        dk[k0:k1] = scale * (
            dlogits.transpose(0, 2, 1) @ qh[q0:q1].transpose(1, 0, 2)
        ).transpose(1, 0, 2)
    return dq, dk, dv
