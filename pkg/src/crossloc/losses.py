"""Training losses: center-heatmap focal loss, box L1, gate-entropy term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TrainingAborted
from .gmoe import gate_log_weight_term
from .head import TargetMaps
from .tensor import Tensor, clamp_min, gather, log, pow_
from . import tensor as T

LOG_EPS = 1e-12


@dataclass
class FocalParams:
    gamma: float = 2.0
    beta: float = 4.0

    def __post_init__(self):
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("focal exponents must be non-negative")


@dataclass
class LossWeights:
    alpha: float = 0.9   # heatmap
    mu: float = 1.1      # bbox
    lam: float = 0.015   # gate entropy

    def __post_init__(self):
        if min(self.alpha, self.mu, self.lam) < 0:
            raise ValueError("loss weights must be non-negative")


def focal_loss(pred: Tensor, target: np.ndarray, params: FocalParams = FocalParams()) -> Tensor:
    """Center-heatmap focal loss over all cells, averaged by positive count.

    Cells with target exactly 1 take the positive branch (1-p)^gamma * log p;
    every other cell takes (1-y)^beta * p^gamma * log(1-p).  Logs are clamped
    at 1e-12.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        pred = pred.reshape(target.shape)
    pos = (target == 1.0).astype(np.float64)
    n_pos = float(pos.sum())
    if n_pos < 1:
        raise ValueError("focal loss needs at least one positive cell")
    pos_t = Tensor(pos)
    neg_w = Tensor(np.power(1.0 - target, params.beta) * (1.0 - pos))
    log_p = log(clamp_min(pred, LOG_EPS))
    log_1p = log(clamp_min(1.0 - pred, LOG_EPS))
    pos_term = (pos_t * pow_(1.0 - pred, params.gamma) * log_p).sum()
    neg_term = (neg_w * pow_(pred, params.gamma) * log_1p).sum()
    return -(pos_term + neg_term) * (1.0 / n_pos)


def bbox_l1_loss(pred: Tensor, targets: list[TargetMaps]) -> Tensor:
    """Mean L1 distance of (dx, dy, w, h) at each sample's positive cell."""
    b, h, w, _ = pred.shape
    if len(targets) != b:
        raise ValueError(f"{len(targets)} targets for batch of {b}")
    idx = np.array([i * h * w + t.pos_cell[1] * w + t.pos_cell[0] for i, t in enumerate(targets)])
    gt = np.array([[t.offset[0], t.offset[1], t.size[0], t.size[1]] for t in targets])
    picked = gather(pred.reshape(b * h * w, 4), idx)
    return T.abs_(picked - Tensor(gt)).sum() * (1.0 / b)


def entropy_loss(decisions, lam: float) -> Tensor:
    """Gate-entropy regularizer: lam * mean_g sum_i g_i log g_i (<= 0).

    Minimizing it pushes gate distributions toward maximum entropy.
    """
    return gate_log_weight_term(decisions) * lam


def total_loss(
    heatmap_loss: Tensor,
    bbox_loss: Tensor,
    entropy_term: Tensor | None,
    weights: LossWeights,
) -> Tensor:
    """alpha * L_hm + mu * L_bbox + lam * L_entropy (entropy term comes in unweighted)."""
    for name, comp in (("heatmap", heatmap_loss), ("bbox", bbox_loss), ("entropy", entropy_term)):
        if comp is not None and not np.all(np.isfinite(comp.data)):
            raise TrainingAborted(f"non-finite {name} loss component")
    out = heatmap_loss * weights.alpha + bbox_loss * weights.mu
    if entropy_term is not None:
        out = out + entropy_term * weights.lam
    return out
