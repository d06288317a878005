"""Desk-scale check that the gaze loss pulls a model map onto a gaze map.

Plain projected gradient descent on the raw map values; the projection keeps
the map non-negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fixations import FixationRecord, FixationSequence
from .losses import gaze_loss
from .metrics import jensen_shannon
from .saliency import AttentionMap, center_of_mass, render_heatmap, to_distribution

DEFAULT_FIXATIONS = (
    (0.30, 0.35, 0.4),
    (0.70, 0.40, 0.6),
    (0.50, 0.75, 0.3),
)


@dataclass
class RecoveryResult:
    model: AttentionMap
    gaze: AttentionMap
    jsd_bits: float
    com_distance_px: float
    history: list = field(default_factory=list)


def synthetic_sequence(points=DEFAULT_FIXATIONS) -> FixationSequence:
    return FixationSequence([FixationRecord(x, y, d, 1.0, float(i), True)
                             for i, (x, y, d) in enumerate(points)])


def recover(a_gaze, n_fix: int, q_score: float = 1.0, steps: int = 500,
            lr: float = 2.0, init=None) -> RecoveryResult:
    g = np.asarray(a_gaze, dtype=np.float64)
    m = np.full_like(g, g.mean()) if init is None else np.array(init, dtype=np.float64)
    history = []
    for _ in range(steps):
        b = gaze_loss(m, g, n_fix, q_score)
        history.append(b.gaze_total)
        m = np.maximum(m - lr * b.grad, 0.0)
    jsd = jensen_shannon(to_distribution(m, "sum_normalize"),
                         to_distribution(g, "sum_normalize"))
    dist = float(np.hypot(*(np.subtract(center_of_mass(m), center_of_mass(g)))))
    return RecoveryResult(AttentionMap(m), AttentionMap(g), jsd, dist, history)


def run(size: int = 32, steps: int = 500, lr: float = 2.0) -> RecoveryResult:
    seq = synthetic_sequence()
    gaze = render_heatmap(seq, (size, size))
    return recover(gaze, seq.n_fix, seq.q_score, steps=steps, lr=lr)
