"""Which cache rows a rewrite touches.

At each step boundary the rewrite set for layer ``l`` is the just-completed
step's positions (the recent window) plus the ``k`` earlier positions that
the step's tokens attended to most, averaged over heads and query tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


class SelectionError(ValueError):
    pass


@dataclass
class SelectionSet:
    recent: np.ndarray            # J_n, ascending
    recalled: list[np.ndarray]    # per layer, ascending
    mass: list[np.ndarray]        # per layer, alpha over the prior positions

    @property
    def n_layers(self) -> int:
        return len(self.recalled)

    def merged(self, layer: int) -> np.ndarray:
        """Rewrite indices for ``layer`` in ascending cache order."""
        return np.union1d(self.recent, self.recalled[layer])

    def is_recalled(self, layer: int) -> np.ndarray:
        """Boolean per row of :meth:`merged`: True for recalled, False for recent."""
        return np.isin(self.merged(layer), self.recalled[layer])


def compute_recall_mass(
    attention_rows: Mapping[int, np.ndarray],
    recent: Sequence[int],
    prior: Sequence[int],
) -> np.ndarray:
    """Mean attention (over heads and recent query tokens) paid to each prior position.

    ``attention_rows[j]`` is the ``[H, >= j + 1]`` attention row of query ``j``.
    """
    recent = list(recent)
    prior = np.asarray(prior, dtype=np.int64)
    if not recent:
        raise SelectionError("recent window is empty")
    missing = [j for j in recent if j not in attention_rows]
    if missing:
        raise SelectionError(f"no buffered attention rows for positions {missing[:5]}")
    if prior.size == 0:
        return np.zeros(0)
    total = None
    H = None
    for j in recent:
        row = attention_rows[j]
        if row.shape[-1] <= prior.max():
            raise SelectionError(f"attention row of position {j} is too short")
        s = row[:, prior].astype(np.float64).sum(axis=0)
        total = s if total is None else total + s
        H = row.shape[0]
    return total / (len(recent) * H)


def select_topk(mass: np.ndarray, k: int, positions: Sequence[int] | None = None) -> np.ndarray:
    """Positions of the ``k`` largest masses; ties go to the smaller position.

    Returned in ascending position order.
    """
    if k < 0:
        raise SelectionError("k must be >= 0")
    mass = np.asarray(mass)
    positions = np.arange(mass.size) if positions is None else np.asarray(positions, dtype=np.int64)
    if k == 0 or mass.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((positions, -mass))
    return np.sort(positions[order[:k]])


def build_selection(step_span: tuple[int, int], cache, k: int) -> SelectionSet:
    """Selection for the step ``[start, end)`` that just completed in ``cache``."""
    start, end = step_span
    if end <= start:
        raise SelectionError(f"empty step span {step_span}")
    if end > cache.length or start < 0:
        raise SelectionError(f"step span {step_span} outside cache of length {cache.length}")
    recent = np.arange(start, end)
    prior = np.arange(start)
    recalled, masses = [], []
    for rows in cache.attn_rows:
        alpha = compute_recall_mass(rows, recent, prior)
        masses.append(alpha)
        recalled.append(select_topk(alpha, k, prior))
    return SelectionSet(recent, recalled, masses)
