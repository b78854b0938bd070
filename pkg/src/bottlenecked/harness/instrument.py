"""Rewrite-magnitude statistics from pre/post cache snapshots.

A snapshot holds, for one (invocation, layer), the selected row indices, a
recalled/recent flag per row, and ``[rows, H, d_head]`` key and value
arrays before and after the rewrite. Distances are per (row, head) vector.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

GROUPS = ("topk", "rsw", "all")


def cosine_distance(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``1 - a.b / (|a||b|)`` over the last axis, in float64.

    Returns ``(distance, zero_flag)``; pairs with a zero-norm side get
    distance 0 and are flagged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    zero = (na == 0) | (nb == 0)
    denom = np.where(zero, 1.0, na * nb)
    cos = np.clip((a * b).sum(axis=-1) / denom, -1.0, 1.0)
    same = np.all(a == b, axis=-1)
    return np.where(zero | same, 0.0, 1.0 - cos), zero


@dataclass
class InvocationStats:
    """Per-invocation group means and per (layer, head) means."""

    rows: list[dict] = field(default_factory=list)
    heatmap_k: np.ndarray | None = None
    heatmap_v: np.ndarray | None = None
    zero_norm: int = 0

    def series(self, part: str, group: str) -> list[float]:
        return [r[f"{part}_{group}"] for r in self.rows]


def _mean(x: np.ndarray) -> float:
    return float(x.mean()) if x.size else float("nan")


def measure_rewrite_magnitudes(snapshots: Iterable[dict]) -> InvocationStats:
    snaps = list(snapshots)
    stats = InvocationStats()
    if not snaps:
        return stats
    n_layers = max(s["layer"] for s in snaps) + 1
    H = snaps[0]["k_pre"].shape[1] if snaps[0]["k_pre"].ndim == 3 else 1
    sums = {p: np.zeros((n_layers, H)) for p in "kv"}
    counts = np.zeros((n_layers, H))
    per_inv: dict[int, dict[str, list[np.ndarray]]] = {}
    for s in snaps:
        recalled = np.asarray(s["recalled"], dtype=bool)
        acc = per_inv.setdefault(int(s["invocation"]), {})
        for p in "kv":
            pre = np.asarray(s[f"{p}_pre"])
            post = np.asarray(s[f"{p}_post"])
            if pre.shape != post.shape or pre.shape[0] != recalled.size:
                raise ValueError(f"snapshot shapes disagree: {pre.shape} {post.shape} {recalled.size}")
            pre = pre.reshape(pre.shape[0], H, -1)
            post = post.reshape(post.shape[0], H, -1)
            d, zero = cosine_distance(pre, post)          # [rows, H]
            stats.zero_norm += int(zero.sum())
            acc.setdefault(f"{p}_topk", []).append(d[recalled].ravel())
            acc.setdefault(f"{p}_rsw", []).append(d[~recalled].ravel())
            acc.setdefault(f"{p}_all", []).append(d.ravel())
            sums[p][s["layer"]] += d.sum(axis=0)
        counts[s["layer"]] += recalled.size
        acc.setdefault("n_topk", []).append(np.array([recalled.sum()]))
        acc.setdefault("n_rsw", []).append(np.array([(~recalled).sum()]))
    for inv in sorted(per_inv):
        acc = per_inv[inv]
        row = {"invocation": inv}
        for p in "kv":
            for g in GROUPS:
                row[f"{p}_{g}"] = _mean(np.concatenate(acc[f"{p}_{g}"]))
        row["n_topk"] = int(np.concatenate(acc["n_topk"]).sum())
        row["n_rsw"] = int(np.concatenate(acc["n_rsw"]).sum())
        stats.rows.append(row)
    with np.errstate(invalid="ignore", divide="ignore"):
        stats.heatmap_k = np.where(counts > 0, sums["k"] / np.maximum(counts, 1), np.nan)
        stats.heatmap_v = np.where(counts > 0, sums["v"] / np.maximum(counts, 1), np.nan)
    return stats


def snapshots_from_records(records) -> list[dict]:
    """Flatten in-memory :class:`InvocationRecord` objects to snapshot dicts."""
    out = []
    for r in records:
        for s in r.snapshots:
            d = dict(s)
            d["invocation"] = r.index
            out.append(d)
    return out


def write_series_csv(path, stats: InvocationStats) -> None:
    cols = ["invocation"] + [f"{p}_{g}" for p in "kv" for g in GROUPS] + ["n_topk", "n_rsw"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in stats.rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def write_heatmap_csv(path, stats: InvocationStats) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "key", "value"])
        if stats.heatmap_k is None:
            return
        for l in range(stats.heatmap_k.shape[0]):
            for h in range(stats.heatmap_k.shape[1]):
                w.writerow([l, h, repr(float(stats.heatmap_k[l, h])), repr(float(stats.heatmap_v[l, h]))])
