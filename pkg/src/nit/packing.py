"""Fixed-budget sequence packing for variable-length token sequences.

Plans packs with a longest-pack-first histogram algorithm, builds
cumulative-sequence-length offsets, and assembles packed batches with
per-instance metadata. Planning is deterministic: ties break toward the
lower original index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tokenizer import ShapeError, TokenMatrix

INT32_MAX = 2**31 - 1


class PackingError(ValueError):
    """Raised for invalid packing inputs (oversized instance, overflow)."""


@dataclass
class PackPlan:
    """Partition of instance indices into packs, each within the token budget."""

    packs: list[list[int]]
    max_len: int


@dataclass
class PackedBatch:
    """Concatenated variable-length token sequences plus aligned metadata."""

    tokens: np.ndarray  # (sum N_i, token_dim)
    cu_seqlens: np.ndarray  # int32, [0, N_1, N_1+N_2, ...]
    hw_list: list[tuple[int, int]]  # per-instance token-grid dims
    labels: list[int | None] = field(default_factory=list)
    times: np.ndarray | None = None  # per-instance t in [0, 1]

    @property
    def num_instances(self) -> int:
        return len(self.cu_seqlens) - 1

    def segments(self):
        """Yield (start, end) row ranges, one per instance."""
        for k in range(self.num_instances):
            yield int(self.cu_seqlens[k]), int(self.cu_seqlens[k + 1])


def plan_packing(token_counts: list[int], max_len: int) -> PackPlan:
    """Longest-pack-first histogram packing.

    Sorts lengths descending (stable on original index), then repeatedly
    opens a pack with the longest remaining instance and greedily tops it
    up with the largest instance that still fits. Every instance lands in
    exactly one pack; leftovers ship in underfull packs rather than being
    dropped.
    """
    for i, n in enumerate(token_counts):
        if n <= 0:
            raise PackingError(f"instance {i} has non-positive token count {n}")
        if n > max_len:
            raise PackingError(
                f"instance {i} has {n} tokens, exceeding the budget {max_len}"
            )
    # Stable sort: equal lengths keep ascending original index.
    order = sorted(range(len(token_counts)), key=lambda i: (-token_counts[i], i))
    remaining = list(order)
    packs: list[list[int]] = []
    while remaining:
        idx = remaining.pop(0)
        pack = [idx]
        room = max_len - token_counts[idx]
        pos = 0
        while pos < len(remaining) and room > 0:
            cand = remaining[pos]
            if token_counts[cand] <= room:
                pack.append(cand)
                room -= token_counts[cand]
                remaining.pop(pos)
            else:
                pos += 1
        packs.append(pack)
    return PackPlan(packs=packs, max_len=max_len)


def build_cu_seqlens(token_counts: list[int]) -> np.ndarray:
    """Prefix sums [0, N_1, N_1+N_2, ...] as int32, rejecting overflow."""
    for i, n in enumerate(token_counts):
        if n <= 0:
            raise PackingError(f"instance {i} has non-positive token count {n}")
    total = sum(token_counts)
    if total > INT32_MAX:
        raise PackingError(f"total token count {total} overflows int32")
    out = np.zeros(len(token_counts) + 1, dtype=np.int32)
    np.cumsum(token_counts, out=out[1:])
    return out


def assemble_packed_batch(
    token_matrices: list[TokenMatrix],
    pack: list[int],
    labels: list[int | None] | None = None,
    times: np.ndarray | None = None,
) -> PackedBatch:
    """Concatenate the pack's token matrices in order, with aligned metadata."""
    dims = {token_matrices[i].tokens.shape[1] for i in pack}
    if len(dims) > 1:
        raise ShapeError(f"mixed token dims in pack: {sorted(dims)}")
    counts = [token_matrices[i].tokens.shape[0] for i in pack]
    tokens = np.concatenate([token_matrices[i].tokens for i in pack], axis=0)
    return PackedBatch(
        tokens=tokens,
        cu_seqlens=build_cu_seqlens(counts),
        hw_list=[token_matrices[i].grid for i in pack],
        labels=[None] * len(pack) if labels is None else [labels[i] for i in pack],
        times=None if times is None else np.asarray([times[i] for i in pack]),
    )


def packing_efficiency(plan: PackPlan, token_counts: list[int]) -> float:
    """Waste fraction 1 - (sum N_i) / (num_packs * L)."""
    total = sum(token_counts[i] for pack in plan.packs for i in pack)
    return 1.0 - total / (len(plan.packs) * plan.max_len)
