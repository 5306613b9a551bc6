"""Axial 2D rotary position embeddings.

Per-token angle vectors concatenate height-axis and width-axis frequency
products; rotation uses the rotate-half layout over consecutive feature
pairs. Coordinates are 0-based raster indices within each instance's own
token grid, so packed instances never leak position across segment
boundaries. Angles are computed in float64 and stored in float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .packing import PackedBatch
from .tokenizer import ShapeError


@dataclass(frozen=True)
class RopeConfig:
    """Rotary configuration for one attention head."""

    head_dim: int
    theta: float = 10000.0

    def __post_init__(self):
        if self.head_dim % 4:
            raise ShapeError(f"head_dim {self.head_dim} must be divisible by 4")

    @property
    def angle_dim(self) -> int:
        return self.head_dim // 2


@dataclass
class RopeTable:
    """Per-token cos/sin, aligned row-for-row with a packed batch.

    ``cos``/``sin`` have shape (total_tokens, head_dim): each angle is
    repeated twice so a row applies directly to consecutive feature pairs.
    """

    cos: np.ndarray
    sin: np.ndarray


def base_frequencies(config: RopeConfig) -> np.ndarray:
    """omega_j = theta^(-2j / angle_dim), j = 0 .. angle_dim/2 - 1."""
    d_s = config.angle_dim
    j = np.arange(d_s // 2, dtype=np.float64)
    return config.theta ** (-2.0 * j / d_s)


def angle_grid(grid_h: int, grid_w: int, omega: np.ndarray) -> np.ndarray:
    """Composite angle vectors for a grid, shape (grid_h*grid_w, 2*len(omega)).

    The row for the token at (h', w') is Concat({h'*omega_j}, {w'*omega_j});
    rows follow raster (row-major) order.
    """
    hs = np.arange(grid_h, dtype=np.float64)
    ws = np.arange(grid_w, dtype=np.float64)
    h_ang = hs[:, None, None] * omega[None, None, :] * np.ones((1, grid_w, 1))
    w_ang = ws[None, :, None] * omega[None, None, :] * np.ones((grid_h, 1, 1))
    return np.concatenate([h_ang, w_ang], axis=-1).reshape(grid_h * grid_w, 2 * len(omega))


def rotate_half(v: np.ndarray) -> np.ndarray:
    """(v0, v1, v2, v3, ...) -> (-v1, v0, -v3, v2, ...) over the last axis."""
    x = v.reshape(*v.shape[:-1], -1, 2)
    out = np.stack([-x[..., 1], x[..., 0]], axis=-1)
    return out.reshape(v.shape)


def apply_rotation(v: np.ndarray, phi_row: np.ndarray) -> np.ndarray:
    """Rotate consecutive feature pairs of ``v`` by the angles in ``phi_row``."""
    if v.shape[-1] != 2 * phi_row.shape[-1]:
        raise ShapeError(
            f"vector dim {v.shape[-1]} != 2x angle dim {phi_row.shape[-1]}"
        )
    cos = np.repeat(np.cos(phi_row), 2, axis=-1)
    sin = np.repeat(np.sin(phi_row), 2, axis=-1)
    return v * cos + rotate_half(v) * sin


def apply_rope(v: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Apply a precomputed table; broadcasts over any leading head axes."""
    return v * cos + rotate_half(v) * sin


def apply_rope_backward(grad: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`apply_rope` (rotation by the negated angles)."""
    return grad * cos - rotate_half(grad) * sin


def rope_for_packed(batch: PackedBatch, config: RopeConfig) -> RopeTable:
    """Concatenate per-instance angle grids in pack order.

    Each instance's coordinates restart at (0, 0); rows for one instance
    equal its standalone :func:`angle_grid`.
    """
    omega = base_frequencies(config)
    total = int(batch.cu_seqlens[-1])
    chunks = []
    for (start, end), (gh, gw) in zip(batch.segments(), batch.hw_list):
        if end - start != gh * gw:
            raise ShapeError(
                f"segment length {end - start} != grid {gh}x{gw} token count"
            )
        chunks.append(angle_grid(gh, gw, omega))
    phi = np.concatenate(chunks, axis=0)
    assert phi.shape[0] == total
    cos = np.repeat(np.cos(phi), 2, axis=-1).astype(np.float32)
    sin = np.repeat(np.sin(phi), 2, axis=-1).astype(np.float32)
    return RopeTable(cos=cos, sin=sin)
