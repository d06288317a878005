"""Training objectives: gaze-attention loss, InfoNCE, focal loss and the total.

Gradients are analytic. ``gaze_loss`` differentiates with respect to the
model attention map only; the gaze map is treated as data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .saliency import MapShapeError, PYRAMID_SIZES, as_array

DEGENERATE_STD = 1e-12
N_CONDITIONS = 8


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    lambda1: float = 0.1
    lambda2: float = 0.3
    lambda3: float = 0.15
    alpha: float = 0.7
    focal_gamma: float = 2.0
    class_pos_weights: tuple[float, ...] = (1.0,) * N_CONDITIONS

    def __post_init__(self):
        object.__setattr__(self, "class_pos_weights",
                           tuple(float(w) for w in self.class_pos_weights))
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be non-negative")
        if any(w <= 0 for w in self.class_pos_weights):
            raise ValueError("class_pos_weights must be positive")

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3)

    def to_json(self) -> dict:
        return {
            "tau": self.tau,
            "lambdas": list(self.lambdas),
            "alpha": self.alpha,
            "focal_gamma": self.focal_gamma,
            "class_pos_weights": list(self.class_pos_weights),
        }


@dataclass
class LossBreakdown:
    mse: float
    kl: float
    corr: float
    com: float
    w_q: float
    gaze_total: float
    # unweighted per-term gradients w.r.t. the model map
    term_grads: dict = field(default_factory=dict, repr=False)
    # gradient of gaze_total w.r.t. the model map (finest level for pyramids)
    grad: Optional[np.ndarray] = field(default=None, repr=False)
    scales: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        out = {"mse": self.mse, "kl": self.kl, "corr": self.corr, "com": self.com,
               "w_q": self.w_q, "total": self.gaze_total}
        if self.scales:
            out["scales"] = [s.to_json() for s in self.scales]
        return out


# --- gaze-attention loss -----------------------------------------------------

def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def _com_and_jacobian(v: np.ndarray):
    """Centroid (row, col) plus d(centroid)/d(v) as two H x W arrays."""
    h, w = v.shape
    rows = np.arange(h, dtype=np.float64)[:, None] * np.ones((1, w))
    cols = np.ones((h, 1)) * np.arange(w, dtype=np.float64)[None, :]
    total = v.sum()
    if total == 0:
        zero = np.zeros_like(v)
        return np.array([(h - 1) / 2.0, (w - 1) / 2.0]), zero, zero
    r = (v * rows).sum() / total
    c = (v * cols).sum() / total
    return np.array([r, c]), (rows - r) / total, (cols - c) / total


def gaze_loss(a_model, a_gaze, n_fix: int, q_score: float) -> LossBreakdown:
    m = as_array(a_model)
    g = as_array(a_gaze)
    if m.shape != g.shape or m.ndim != 2:
        raise MapShapeError(f"shape mismatch: model {m.shape} vs gaze {g.shape}")
    if n_fix < 0:
        raise ValueError("n_fix must be non-negative")
    if not 0.0 <= q_score <= 1.0:
        raise ValueError("q_score must lie in [0, 1]")
    h, w = m.shape
    n = m.size

    diff = m - g
    mse = float(np.mean(diff ** 2))
    d_mse = 2.0 * diff / n

    p = _softmax(g.ravel())
    q = _softmax(m.ravel())
    # KL(p || q) with log q taken via log-sum-exp for stability
    log_q = m.ravel() - m.max() - math.log(np.exp(m.ravel() - m.max()).sum())
    log_p = g.ravel() - g.max() - math.log(np.exp(g.ravel() - g.max()).sum())
    kl = float(max(0.0, np.sum(p * (log_p - log_q))))
    d_kl = (q - p).reshape(h, w)

    mc = m - m.mean()
    gc = g - g.mean()
    vm = float((mc * mc).sum())
    vg = float((gc * gc).sum())
    sm, sg = math.sqrt(vm), math.sqrt(vg)
    if sm / math.sqrt(n) < DEGENERATE_STD or sg / math.sqrt(n) < DEGENERATE_STD:
        rho = 0.0
        d_corr = np.zeros_like(m)
    else:
        # one sqrt of the product keeps rho exactly 1 for identical maps
        rho = float((mc * gc).sum()) / math.sqrt(vm * vg)
        rho = min(1.0, max(-1.0, rho))
        d_corr = -(gc / (sm * sg) - rho * mc / sm ** 2)
    corr = 1.0 - rho

    diag = math.hypot(h, w)
    com_m, jr, jc = _com_and_jacobian(m)
    com_g, _, _ = _com_and_jacobian(g)
    delta = com_m - com_g
    dist = float(np.hypot(*delta))
    com = dist / diag
    if dist > 0:
        d_com = (delta[0] * jr + delta[1] * jc) / (dist * diag)
    else:
        d_com = np.zeros_like(m)

    w_q = math.sqrt(n_fix) * q_score
    total = w_q * (mse + kl + corr + com)
    grads = {"mse": d_mse, "kl": d_kl, "corr": d_corr, "com": d_com}
    grad = w_q * (d_mse + d_kl + d_corr + d_com)
    return LossBreakdown(mse, kl, corr, com, w_q, total, grads, grad)


def gaze_loss_multiscale(pyr_model: Sequence, pyr_gaze: Sequence, n_fix: int,
                         q_score: float) -> LossBreakdown:
    """Mean of the per-scale gaze losses over the 224/112/56 pyramid.

    ``grad`` is taken w.r.t. the finest model level, treating the coarser
    levels as 2x2 mean pools of it.
    """
    ms = [as_array(a) for a in pyr_model]
    gs = [as_array(a) for a in pyr_gaze]
    expected = [(s, s) for s in PYRAMID_SIZES]
    if [a.shape for a in ms] != expected or [a.shape for a in gs] != expected:
        raise MapShapeError("pyramids must hold 224x224, 112x112 and 56x56 levels")
    per = [gaze_loss(m, g, n_fix, q_score) for m, g in zip(ms, gs)]
    k = len(per)

    grad = np.zeros_like(ms[0])
    for level, b in enumerate(per):
        f = 2 ** level
        # adjoint of repeated 2x2 mean pooling: spread evenly over the f x f block
        grad += np.kron(b.grad, np.ones((f, f))) / (f * f) / k

    return LossBreakdown(
        mse=sum(b.mse for b in per) / k,
        kl=sum(b.kl for b in per) / k,
        corr=sum(b.corr for b in per) / k,
        com=sum(b.com for b in per) / k,
        w_q=per[0].w_q,
        gaze_total=sum(b.gaze_total for b in per) / k,
        grad=grad,
        scales=per,
    )


# --- contrastive -------------------------------------------------------------

def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding")
    return x / norms[:, None], norms


def info_nce(anchors, positives, tau: float = 0.07, return_grad: bool = False):
    """InfoNCE with cosine similarity and in-batch negatives.

    Row i of ``anchors`` is paired with row i of ``positives``; every other
    positive in the batch is a negative. With ``return_grad`` the result is
    ``(loss, d_anchors, d_positives)``.
    """
    a = np.asarray(anchors, dtype=np.float64)
    b = np.asarray(positives, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"anchors {a.shape} and positives {b.shape} must match")
    if a.shape[0] < 2:
        raise ValueError("InfoNCE needs a batch of at least 2")
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = a.shape[0]
    ua, na = _unit_rows(a)
    ub, nb = _unit_rows(b)
    logits = ua @ ub.T / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_prob = shifted - log_z[:, None]
    loss = float(-np.mean(np.diag(log_prob)))
    if not return_grad:
        return loss

    probs = np.exp(log_prob)
    d_logits = (probs - np.eye(n)) / n
    d_sim = d_logits / tau
    d_ua = d_sim @ ub
    d_ub = d_sim.T @ ua
    # back through x -> x/|x|
    d_a = (d_ua - ua * (d_ua * ua).sum(axis=1, keepdims=True)) / na[:, None]
    d_b = (d_ub - ub * (d_ub * ub).sum(axis=1, keepdims=True)) / nb[:, None]
    return loss, d_a, d_b


# --- classification ----------------------------------------------------------

def focal_loss(logits, targets, cfg: LossConfig = LossConfig()) -> float:
    """Multi-label focal loss, positive terms scaled by the class weights.

    Accepts a single vector of per-class logits or a (batch, classes) array;
    the result is the mean over every entry.
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if z.shape != t.shape:
        raise ValueError(f"logits {z.shape} and targets {t.shape} differ")
    weights = np.asarray(cfg.class_pos_weights)
    if z.shape[-1] != weights.size:
        raise ValueError(f"expected {weights.size} classes, got {z.shape[-1]}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("targets must be binary")
    gamma = cfg.focal_gamma
    log_p = -np.logaddexp(0.0, -z)
    log_1mp = -np.logaddexp(0.0, z)
    p = np.exp(log_p)
    pos = -weights * (1.0 - p) ** gamma * log_p
    neg = -(p ** gamma) * log_1mp
    return float(np.mean(np.where(t == 1, pos, neg)))


def ensemble_logit(global_logits, specific_logits, alpha: float = 0.7) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    g = np.asarray(global_logits, dtype=np.float64)
    s = np.asarray(specific_logits, dtype=np.float64)
    if alpha == 1.0:
        return g.copy()
    return alpha * g + (1.0 - alpha) * s


def total_loss(cls: float, nce: float, gaze: float, gaze_text: float,
               cfg: LossConfig = LossConfig()) -> float:
    return cls + cfg.lambda1 * nce + cfg.lambda2 * gaze + cfg.lambda3 * gaze_text


def default_config_json() -> dict:
    return LossConfig().to_json()


__all__ = [
    "LossConfig", "LossBreakdown", "gaze_loss", "gaze_loss_multiscale", "info_nce",
    "focal_loss", "ensemble_logit", "total_loss", "default_config_json",
]
