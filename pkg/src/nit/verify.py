"""Self-contained invariant suites, runnable from the CLI `verify` command.

Each suite returns a SuiteResult; the CLI renders them as text and CSV and
maps any failure to a nonzero exit code. A fault-injection hook flips one
attention sign so the harness itself can be smoke-tested.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, packed_varlen_attention, reference_attention
from .blocks import (
    ModelConfig,
    NiTModel,
    embed_condition,
    init_params,
    nit_block_forward,
    rope_table_for,
)
from .diffusion import fm_loss, fm_loss_grad
from .packing import build_cu_seqlens, packing_efficiency, plan_packing
from .rope import RopeConfig, angle_grid, apply_rotation, base_frequencies


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0


def _random_pack(rng, max_instances=8, max_len=64):
    n = int(rng.integers(1, max_instances + 1))
    lens = [int(rng.integers(1, max_len + 1)) for _ in range(n)]
    return build_cu_seqlens(lens)


def check_packing(trials: int = 200, seed: int = 0) -> SuiteResult:
    """Partition, capacity, determinism, and waste dominance on random workloads."""
    t0 = time.time()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        m = int(rng.integers(1, 40))
        budget = int(rng.integers(64, 4096))
        counts = [int(rng.integers(1, budget + 1)) for _ in range(m)]
        plan = plan_packing(counts, budget)
        again = plan_packing(counts, budget)
        if plan.packs != again.packs:
            return SuiteResult("packing", False, {"error": "nondeterministic plan"})
        packed = sorted(i for pack in plan.packs for i in pack)
        if packed != list(range(m)):
            return SuiteResult("packing", False, {"error": "partition violated"})
        for pack in plan.packs:
            if sum(counts[i] for i in pack) > budget:
                return SuiteResult("packing", False, {"error": "capacity violated"})
        waste = packing_efficiency(plan, counts)
        pad_waste = 1.0 - sum(counts) / (m * budget)
        if waste > pad_waste + 1e-12:
            return SuiteResult("packing", False, {"error": "waste exceeds pad-to-L baseline"})
        worst = max(worst, waste)
    return SuiteResult(
        "packing", True, {"trials": trials, "max_waste": round(worst, 4)},
        time.time() - t0,
    )


def check_attention_equivalence(
    trials: int = 50, seed: int = 0, tol: float = 1e-5, inject_fault: bool = False
) -> SuiteResult:
    """Max |packed - reference| over random packs, with RoPE settings varied."""
    t0 = time.time()
    rng = np.random.default_rng(seed)
    max_dev = 0.0
    for trial in range(trials):
        heads = int(rng.choice([1, 2, 4]))
        head_dim = int(rng.choice([4, 8, 16]))
        cfg = AttentionConfig(heads * head_dim, heads, tile_size=int(rng.choice([3, 16, 64])))
        cu = _random_pack(rng, max_len=96)
        total = int(cu[-1])
        q, k, v = (rng.standard_normal((total, cfg.model_dim)).astype(np.float32) for _ in range(3))
        ref = reference_attention(q, k, v, cu, cfg)
        packed = packed_varlen_attention(q, k, v, cu, cfg)
        if inject_fault and trial == 0:
            packed = packed.copy()
            packed[0, 0] = -packed[0, 0]
        max_dev = max(max_dev, float(np.abs(ref - packed).max()))
    return SuiteResult(
        "attention_oracle_equivalence",
        max_dev <= tol,
        {"trials": trials, "max_deviation": max_dev, "tolerance": tol},
        time.time() - t0,
    )


def check_rope_invariance(trials: int = 20, seed: int = 0, tol: float = 1e-5) -> SuiteResult:
    """Attention logits are unchanged when all 2D coordinates translate."""
    t0 = time.time()
    rng = np.random.default_rng(seed)
    worst = 0.0
    cfg = RopeConfig(head_dim=16)
    omega = base_frequencies(cfg)
    for _ in range(trials):
        gh, gw = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        n = gh * gw
        q = rng.standard_normal((n, cfg.head_dim))
        k = rng.standard_normal((n, cfg.head_dim))
        dh, dw = (int(rng.integers(0, 65)) for _ in range(2))
        phi0 = angle_grid(gh, gw, omega)
        phi1 = phi0.copy()
        phi1[:, : cfg.angle_dim // 2] += dh * omega
        phi1[:, cfg.angle_dim // 2 :] += dw * omega
        logits0 = apply_rotation(q, phi0) @ apply_rotation(k, phi0).T
        logits1 = apply_rotation(q, phi1) @ apply_rotation(k, phi1).T
        worst = max(worst, float(np.abs(logits0 - logits1).max()))
    return SuiteResult(
        "rope_translation_invariance", worst <= tol,
        {"trials": trials, "max_deviation": worst, "tolerance": tol},
        time.time() - t0,
    )


def check_adaln_zero_identity(trials: int = 5, seed: int = 0) -> SuiteResult:
    """Untrained model: zero velocity output and identity blocks."""
    t0 = time.time()
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(dim=64, depth=4, num_heads=4, in_channels=12, num_classes=4)
    model = NiTModel(cfg, seed=seed)
    for _ in range(trials):
        cu = _random_pack(rng, max_instances=3, max_len=16)
        hw_list = [(int(cu[i + 1] - cu[i]), 1) for i in range(len(cu) - 1)]
        total = int(cu[-1])
        tokens = rng.standard_normal((total, cfg.token_dim)).astype(np.float32)
        t = rng.random(len(hw_list))
        labels = [int(rng.integers(cfg.num_classes)) for _ in hw_list]
        out, _ = model.forward(tokens, cu, hw_list, t, labels)
        if np.abs(out).max() != 0.0:
            return SuiteResult("adaln_zero_identity", False, {"error": "nonzero output at init"})
        z = rng.standard_normal((total, cfg.dim)).astype(np.float32)
        c, _ = embed_condition(model.params, cfg, t, labels)
        table = rope_table_for(hw_list, cfg.head_dim, cfg.rope_theta)
        z_out, _ = nit_block_forward(z, c, cu, table, model.params, "blocks.0.", cfg)
        if np.abs(z_out - z).max() > 1e-6:
            return SuiteResult("adaln_zero_identity", False, {"error": "block not identity"})
    return SuiteResult("adaln_zero_identity", True, {"trials": trials}, time.time() - t0)


def check_gradients(
    n_coords: int = 120, seed: int = 0, step: float = 1e-4, tol: float = 1e-3
) -> SuiteResult:
    """Analytic loss gradients vs central finite differences (float64)."""
    t0 = time.time()
    rel = gradient_check(n_coords=n_coords, seed=seed, step=step)
    return SuiteResult(
        "gradient_finite_difference",
        rel <= tol,
        {"coords": n_coords, "max_rel_error": rel, "tolerance": tol},
        time.time() - t0,
    )


def gradient_check(
    n_coords: int = 120,
    seed: int = 0,
    step: float = 1e-4,
    config: ModelConfig | None = None,
) -> float:
    """Max relative error between analytic and FD gradients on sampled coords.

    Runs entirely in float64 on a small randomized model (zero-init tensors
    are perturbed so every parameter actually influences the loss).
    """
    rng = np.random.default_rng(seed)
    cfg = config or ModelConfig(
        dim=16, depth=2, num_heads=2, in_channels=3, num_classes=3, qk_norm=True,
        time_freq_dim=16,
    )
    params = init_params(cfg, seed)
    params = {k: v.astype(np.float64) for k, v in params.items()}
    for k in params:
        params[k] = params[k] + 0.05 * rng.standard_normal(params[k].shape)
    model = NiTModel(cfg, params)

    cu = build_cu_seqlens([4, 6])
    hw_list = [(2, 2), (2, 3)]
    total = int(cu[-1])
    tokens = rng.standard_normal((total, cfg.token_dim))
    targets = rng.standard_normal((total, cfg.token_dim))
    t = rng.random(len(hw_list))
    labels = [int(rng.integers(cfg.num_classes)) for _ in hw_list]

    def loss_fn():
        out, _ = model.forward(tokens, cu, hw_list, t, labels)
        return fm_loss(out, targets, cu)

    out, cache = model.forward(tokens, cu, hw_list, t, labels, train=True)
    grads = model.backward(fm_loss_grad(out, targets, cu), cache)

    names = sorted(params)
    worst = 0.0
    for _ in range(n_coords):
        name = names[int(rng.integers(len(names)))]
        flat = params[name].reshape(-1)
        idx = int(rng.integers(flat.size))
        orig = flat[idx]
        flat[idx] = orig + step
        lp = loss_fn()
        flat[idx] = orig - step
        lm = loss_fn()
        flat[idx] = orig
        fd = (lp - lm) / (2 * step)
        an = grads[name].reshape(-1)[idx]
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
        worst = max(worst, rel)
    return worst


def run_all(seed: int = 0, inject_fault: bool = False) -> list[SuiteResult]:
    return [
        check_packing(seed=seed),
        check_attention_equivalence(seed=seed, inject_fault=inject_fault),
        check_rope_invariance(seed=seed),
        check_adaln_zero_identity(seed=seed),
        check_gradients(seed=seed),
    ]
