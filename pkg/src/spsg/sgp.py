"""Sample gradient purification.

Per channel, keep only superpixel gradients that reach a fraction ``beta``
of that channel's positive (resp. negative) extremum, then rescale the kept
values by the extremum magnitude so they land in (beta, 1] with their sign.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PurifiedGradient:
    values: np.ndarray  # J×C, zeros where discarded
    mask: np.ndarray  # J×C bool survivors
    beta: float
    pos_extrema: np.ndarray  # per channel, 0 if no nonnegative entry is positive
    neg_extrema: np.ndarray  # per channel, most negative entry or 0

    @property
    def n_survivors(self) -> int:
        return int(self.mask.sum())


def purify(g, beta: float = 0.5) -> PurifiedGradient:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 1:
        g = g[:, None]
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    pos = np.where(g >= 0, g, 0.0)
    neg = np.where(g < 0, g, 0.0)
    g_pos = pos.max(axis=0) if len(g) else np.zeros(g.shape[1])
    g_neg = neg.min(axis=0) if len(g) else np.zeros(g.shape[1])
    # zero entries never survive: 0 > beta * g_pos is false whenever g_pos >= 0
    keep_pos = (g > beta * g_pos) & (g_pos > 0)
    keep_neg = (g < beta * g_neg) & (g_neg < 0)
    values = np.zeros_like(g)
    safe_pos = np.where(g_pos > 0, g_pos, 1.0)
    safe_neg = np.where(g_neg < 0, -g_neg, 1.0)
    values = np.where(keep_pos, g / safe_pos, values)
    values = np.where(keep_neg, g / safe_neg, values)
    return PurifiedGradient(values, keep_pos | keep_neg, float(beta), g_pos, g_neg)


def survivors(p: PurifiedGradient) -> list[tuple[int, int]]:
    """Surviving (j, c) positions, channel-major then ascending j."""
    return [(int(j), int(c)) for c in range(p.mask.shape[1]) for j in np.flatnonzero(p.mask[:, c])]
