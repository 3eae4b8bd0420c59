"""Attention cost: windowed + grid attention against dense global attention.

MACs count the two attention matmuls (``Q K^T`` and ``A V``); the QKV and output
projections are linear in the token count for both variants and are reported
separately.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ops
from .blocks import RelativeAttention, grid_partition, window_partition
from .tensor import Tensor, no_grad


def core_macs(tokens: int, seq_len: int, channels: int) -> int:
    """``Q K^T`` plus ``A V`` over ``tokens / seq_len`` sequences of length ``seq_len``."""
    return 2 * tokens * seq_len * channels


@dataclass
class AttentionCost:
    size: int
    tokens: int
    window_macs: int
    grid_macs: int
    windowed_macs: int
    dense_macs: int
    projection_macs: int
    measured_windowed_macs: int | None = None
    measured_dense_macs: int | None = None
    windowed_seconds: float | None = None
    dense_seconds: float | None = None


def analytic(size: int, channels: int = 64, window: int = 8, grid: int = 8) -> AttentionCost:
    t = size * size
    wm = core_macs(t, min(window, size) ** 2, channels)
    gm = core_macs(t, min(grid, size) ** 2, channels)
    return AttentionCost(size, t, wm, gm, wm + gm, core_macs(t, t, channels), 4 * channels * channels * t)


def _run(attn: RelativeAttention, seqs: Tensor, repeats: int) -> tuple[int, float]:
    with no_grad(), ops.count_macs() as counter:
        attn(seqs)
    best = float("inf")
    with no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter()
            attn(seqs)
            best = min(best, time.perf_counter() - t0)
    return counter.by_scope["attention_core"], best


def measure(size: int, channels: int = 64, window: int = 8, grid: int = 8, head_dim: int = 32,
            seed: int = 0, repeats: int = 3, dense_limit: int = 4096) -> AttentionCost:
    """Analytic counts plus measured MACs and best-of-``repeats`` wall time.

    Dense attention is executed only while the token count is at most ``dense_limit``.
    """
    cost = analytic(size, channels, window, grid)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, channels, size, size)))
    w_attn = RelativeAttention(rng, channels, head_dim, min(window, size))
    g_attn = RelativeAttention(rng, channels, head_dim, min(grid, size))
    m1, s1 = _run(w_attn, window_partition(x, min(window, size)), repeats)
    m2, s2 = _run(g_attn, grid_partition(x, min(grid, size)), repeats)
    cost.measured_windowed_macs, cost.windowed_seconds = m1 + m2, s1 + s2
    if cost.tokens <= dense_limit:
        dense = RelativeAttention(rng, channels, head_dim, size)
        cost.measured_dense_macs, cost.dense_seconds = _run(dense, window_partition(x, size), repeats)
    return cost


def ratios(costs: list[AttentionCost]) -> list[dict]:
    """Cost growth between consecutive sizes."""
    out = []
    for a, b in zip(costs, costs[1:]):
        out.append({"from": a.size, "to": b.size, "windowed": b.windowed_macs / a.windowed_macs,
                    "dense": b.dense_macs / a.dense_macs})
    return out


def write_csv(path, costs: list[AttentionCost]) -> Path:
    path = Path(path)
    rows = [asdict(c) for c in costs]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path


def format_table(costs: list[AttentionCost]) -> str:
    lines = [f"{'size':>5} {'tokens':>7} {'windowed MACs':>14} {'dense MACs':>14} {'win s':>8} {'dense s':>8}"]
    for c in costs:
        ws = f"{c.windowed_seconds:.4f}" if c.windowed_seconds is not None else "-"
        ds = f"{c.dense_seconds:.4f}" if c.dense_seconds is not None else "-"
        lines.append(f"{c.size:>5} {c.tokens:>7} {c.windowed_macs:>14} {c.dense_macs:>14} {ws:>8} {ds:>8}")
    for r in ratios(costs):
        lines.append(f"{r['from']}->{r['to']}: windowed x{r['windowed']:.3f}  dense x{r['dense']:.3f}")
    return "\n".join(lines)
