"""Human vs model attention alignment metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats

from .fixations import FixationSequence
from .saliency import DistributionView, MapShapeError, as_array, to_distribution

DEGENERATE_STD = 1e-12


class PearsonResult(NamedTuple):
    r: float
    p: float
    degenerate: bool = False


@dataclass
class AlignmentReport:
    pearson_r: float
    pearson_p: float
    mse: float
    jsd_bits: float
    nss: float
    entropy_human_bits: float
    entropy_model_bits: float
    p_value_kind: str = "nominal"
    degenerate: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def pearson(map_a, map_b) -> PearsonResult:
    """Pixel-wise Pearson r and a nominal two-sided p-value.

    The p-value treats every pixel as an independent sample (n = pixel count),
    so it ignores spatial autocorrelation.
    """
    a = as_array(map_a).ravel()
    b = as_array(map_b).ravel()
    if a.shape != b.shape:
        raise MapShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    n = a.size
    if n < 3:
        raise ValueError("pearson needs at least 3 pixels")
    ac = a - a.mean()
    bc = b - b.mean()
    sa = math.sqrt(float(ac @ ac) / n)
    sb = math.sqrt(float(bc @ bc) / n)
    if sa < DEGENERATE_STD or sb < DEGENERATE_STD:
        return PearsonResult(0.0, 1.0, True)
    r = float(ac @ bc) / (n * sa * sb)
    r = min(1.0, max(-1.0, r))
    if abs(r) == 1.0:
        return PearsonResult(r, 0.0)
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = float(2.0 * stats.t.sf(abs(t), n - 2))
    return PearsonResult(r, min(1.0, max(0.0, p)))


def _probs(d) -> np.ndarray:
    return d.probs if isinstance(d, DistributionView) else np.asarray(d, dtype=np.float64).ravel()


def _kl_bits(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log2(p[mask] / q[mask])))


def jensen_shannon(p, q) -> float:
    """Base-2 Jensen-Shannon divergence, in [0, 1]."""
    pp, qq = _probs(p), _probs(q)
    if pp.shape != qq.shape:
        raise MapShapeError(f"distribution sizes differ: {pp.size} vs {qq.size}")
    m = 0.5 * (pp + qq)
    value = 0.5 * (_kl_bits(pp, m) + _kl_bits(qq, m))
    return min(1.0, max(0.0, value))


def entropy_bits(d) -> float:
    pp = _probs(d)
    nz = pp[pp > 0]
    return float(max(0.0, -np.sum(nz * np.log2(nz))))


def fixation_pixels(fixations: FixationSequence, shape: tuple[int, int]) -> list[tuple[int, int]]:
    h, w = shape
    return [(int(round(r.y * (h - 1))), int(round(r.x * (w - 1))))
            for r in fixations.valid_records()]


def _nss(model_map, fixations: FixationSequence) -> tuple[float, bool]:
    v = as_array(model_map)
    std = float(v.std())
    pix = fixation_pixels(fixations, v.shape)
    if std < DEGENERATE_STD or not pix:
        return 0.0, True
    z = (v - v.mean()) / std
    return float(np.mean([z[r, c] for r, c in pix])), False


def nss(model_map, fixations: FixationSequence) -> float:
    """Mean z-scored model saliency at each valid fixation's nearest pixel.

    Returns 0.0 for a constant map or a sequence with no valid fixations.
    """
    return _nss(model_map, fixations)[0]


def alignment_report(a_model, a_gaze, fixations: FixationSequence) -> AlignmentReport:
    m = as_array(a_model)
    g = as_array(a_gaze)
    if m.shape != g.shape:
        raise MapShapeError(f"shape mismatch: model {m.shape} vs gaze {g.shape}")
    pr = pearson(m, g)
    dm = to_distribution(m, "sum_normalize")
    dg = to_distribution(g, "sum_normalize")
    nss_value, nss_degenerate = _nss(m, fixations)
    degenerate = []
    if pr.degenerate:
        degenerate.append("pearson")
    if nss_degenerate:
        degenerate.append("nss")
    return AlignmentReport(
        pearson_r=pr.r,
        pearson_p=pr.p,
        mse=float(np.mean((m - g) ** 2)),
        jsd_bits=jensen_shannon(dm, dg),
        nss=nss_value,
        entropy_human_bits=entropy_bits(dg),
        entropy_model_bits=entropy_bits(dm),
        degenerate=degenerate,
    )


def aggregate_reports(reports: list[AlignmentReport]) -> dict:
    """Mean and population std of every numeric field across studies."""
    fields = ("pearson_r", "pearson_p", "mse", "jsd_bits", "nss",
              "entropy_human_bits", "entropy_model_bits")
    out = {"n": len(reports)}
    for name in fields:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = {"mean": float(vals.mean()) if len(vals) else float("nan"),
                     "std": float(vals.std()) if len(vals) else float("nan")}
    return out
