"""Attention maps: fixation heatmaps, distribution views and the scale pyramid."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .fixations import FixationSequence

PYRAMID_SIZES = (224, 112, 56)
DEFAULT_SIGMA_224 = 25.0
TRUNCATE_SIGMAS = 4.0
SMOOTH_EPS = 1e-8
ATNM_MAGIC = b"ATNM"


class MapShapeError(ValueError):
    pass


class AttentionMap:
    """Immutable H x W grid of non-negative finite values."""

    __slots__ = ("_values",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 2:
            raise MapShapeError(f"attention map must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("attention map contains non-finite values")
        if np.any(arr < 0):
            raise ValueError("attention map contains negative values")
        arr.setflags(write=False)
        self._values = arr

    @classmethod
    def zeros(cls, height: int, width: int) -> "AttentionMap":
        return cls(np.zeros((height, width)))

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def height(self) -> int:
        return self._values.shape[0]

    @property
    def width(self) -> int:
        return self._values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._values.shape

    def __array__(self, dtype=None, copy=None):
        return self._values if dtype is None else self._values.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, AttentionMap):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._values, other._values)

    def __repr__(self):
        return f"AttentionMap({self.height}x{self.width}, sum={self._values.sum():.6g})"


@dataclass(frozen=True)
class DistributionView:
    probs: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        total = float(self.probs.sum())
        if abs(total - 1.0) > 1e-9 or np.any(self.probs < 0):
            raise ValueError(f"not a probability distribution (sum={total})")


def as_array(a) -> np.ndarray:
    return a.values if isinstance(a, AttentionMap) else np.asarray(a, dtype=np.float64)


def default_sigma(size: tuple[int, int]) -> float:
    return DEFAULT_SIGMA_224 * min(size) / 224.0


def _gauss_1d(n: int, centers: np.ndarray, sigma: float) -> np.ndarray:
    d = np.arange(n)[None, :] - centers[:, None]
    g = np.exp(-0.5 * (d / sigma) ** 2)
    g[np.abs(d) > TRUNCATE_SIGMAS * sigma] = 0.0
    return g


def render_heatmap(seq: FixationSequence, size: tuple[int, int] = (224, 224),
                   sigma_px: float | None = None, weight: str = "duration",
                   pupil_weight: bool = False) -> AttentionMap:
    """Sum of isotropic Gaussian bumps, one per valid fixation.

    Each bump peaks at the fixation's pixel position with height equal to its
    duration (``weight="count"`` uses height 1). ``pupil_weight`` multiplies
    the height by the relative pupil area.
    """
    h, w = size
    if h < 8 or w < 8:
        raise MapShapeError(f"heatmap size must be at least 8x8, got {size}")
    sigma = default_sigma(size) if sigma_px is None else float(sigma_px)
    if sigma <= 0:
        raise ValueError("sigma_px must be positive")
    if weight not in ("duration", "count"):
        raise ValueError(f"unknown weight mode {weight!r}")
    recs = seq.valid_records()
    if not recs:
        return AttentionMap.zeros(h, w)
    xs = np.array([r.x for r in recs]) * (w - 1)
    ys = np.array([r.y for r in recs]) * (h - 1)
    amp = np.array([r.duration if weight == "duration" else 1.0 for r in recs])
    if pupil_weight:
        amp = amp * np.array([r.pupil for r in recs])
    rows = _gauss_1d(h, ys, sigma)  # (n, h)
    cols = _gauss_1d(w, xs, sigma)  # (n, w)
    return AttentionMap((rows * amp[:, None]).T @ cols)


def to_distribution(m, mode: str = "softmax") -> DistributionView:
    v = as_array(m)
    flat = v.ravel()
    if mode == "softmax":
        e = np.exp(flat - flat.max())
        probs = e / e.sum()
    elif mode == "sum_normalize":
        s = flat + SMOOTH_EPS
        probs = s / s.sum()
    else:
        raise ValueError(f"unknown distribution mode {mode!r}")
    return DistributionView(probs, v.shape)


def avg_pool2(v: np.ndarray) -> np.ndarray:
    h, w = v.shape
    return v.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def multiscale(m) -> list[AttentionMap]:
    """224^2 map -> [224^2, 112^2, 56^2] by repeated 2x2 mean pooling."""
    v = as_array(m)
    if v.shape != (224, 224):
        raise MapShapeError(f"multiscale expects a 224x224 map, got {v.shape}")
    levels = [v]
    for _ in PYRAMID_SIZES[1:]:
        levels.append(avg_pool2(levels[-1]))
    return [AttentionMap(lv) for lv in levels]


def center_of_mass(m) -> tuple[float, float]:
    """Intensity-weighted (row, col) centroid; the image center for an all-zero map."""
    v = as_array(m)
    h, w = v.shape
    total = v.sum()
    if total == 0:
        return ((h - 1) / 2.0, (w - 1) / 2.0)
    r = float(v.sum(axis=1) @ np.arange(h)) / total
    c = float(v.sum(axis=0) @ np.arange(w)) / total
    return (r, c)


# --- binary / image io -------------------------------------------------------

def encode_atnm(m) -> bytes:
    v = as_array(m)
    h, w = v.shape
    return ATNM_MAGIC + struct.pack("<II", h, w) + v.astype("<f4").tobytes(order="C")


def decode_atnm(data: bytes) -> AttentionMap:
    if data[:4] != ATNM_MAGIC:
        raise ValueError("not an ATNM file (bad magic)")
    if len(data) < 12:
        raise ValueError("truncated ATNM header")
    h, w = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != 4 * h * w:
        raise ValueError(f"ATNM payload has {len(body)} bytes, expected {4 * h * w}")
    return AttentionMap(np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(h, w))


def _atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_atnm(path, m) -> None:
    _atomic_write(path, encode_atnm(m))


def load_atnm(path) -> AttentionMap:
    with open(path, "rb") as fh:
        return decode_atnm(fh.read())


def encode_pgm16(m) -> bytes:
    """Binary 16-bit PGM with values min-max scaled to [0, 65535]."""
    v = as_array(m)
    h, w = v.shape
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    pix = np.rint(scaled * 65535).astype(">u2")
    return f"P5\n{w} {h}\n65535\n".encode("ascii") + pix.tobytes()


def save_pgm16(path, m) -> None:
    _atomic_write(path, encode_pgm16(m))
