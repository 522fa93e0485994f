"""Detection loss: penalty-reduced focal loss on heatmaps plus masked L1 regressions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .targets import GroundTruthTargets
from .tensor_core import ShapeError, Tensor

ALPHA = 2.0
BETA = 4.0
SIZE_WEIGHT = 0.1
OFFSET_WEIGHT = 1.0
PROB_EPS = 1e-4


def focal_loss(pred: Tensor, target: np.ndarray, alpha: float = ALPHA, beta: float = BETA) -> Tensor:
    """Sum of focal terms over all cells, divided by the number of unit-peak cells.

    Predictions are clamped to [1e-4, 1 - 1e-4]; clamped cells get no gradient.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"heatmap {pred.shape} vs target {target.shape}")
    dtype = pred.data.dtype
    p_raw = pred.data
    p = np.clip(p_raw, PROB_EPS, 1 - PROB_EPS)
    inside = (p_raw > PROB_EPS) & (p_raw < 1 - PROB_EPS)
    y = target.astype(dtype)
    pos = y == 1
    neg_w = (1 - y) ** beta
    norm = max(int(pos.sum()), 1)
    log_p, log_q = np.log(p), np.log1p(-p)
    per_cell = np.where(pos, -((1 - p) ** alpha) * log_p, -neg_w * p ** alpha * log_q)
    loss = np.asarray(per_cell.sum() / norm, dtype=dtype)

    def backward(g):
        d_pos = alpha * (1 - p) ** (alpha - 1) * log_p - (1 - p) ** alpha / p
        d_neg = neg_w * (-alpha * p ** (alpha - 1) * log_q + p ** alpha / (1 - p))
        return ((np.where(pos, d_pos, d_neg) * inside * (g / norm)).astype(dtype),)

    return Tensor.from_op(loss, [pred], backward, "focal_loss")


def masked_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean absolute error over the two channels at masked (object-centre) cells; 0 when empty."""
    if pred.shape != target.shape or pred.shape[:1] + pred.shape[2:] != mask.shape:
        raise ShapeError(f"regression {pred.shape} vs target {target.shape} / mask {mask.shape}")
    dtype = pred.data.dtype
    m = mask[:, None].astype(dtype)
    diff = pred.data - target.astype(dtype)
    norm = max(2 * int(mask.sum()), 1)
    loss = np.asarray((np.abs(diff) * m).sum() / norm, dtype=dtype)
    return Tensor.from_op(loss, [pred], lambda g: ((np.sign(diff) * m * (g / norm)).astype(dtype),), "masked_l1")


@dataclass
class LossParts:
    heatmap: float
    size: float
    offset: float
    total: float


def detection_loss(outputs, targets: GroundTruthTargets) -> tuple[Tensor, LossParts]:
    """``L_heat + 0.1 * L_size + L_off`` for a batch of head outputs."""
    l_hm = focal_loss(outputs.heatmap, targets.heatmap)
    l_size = masked_l1(outputs.size, targets.size, targets.mask)
    l_off = masked_l1(outputs.offset, targets.offset, targets.mask)
    total = tc.add(tc.add(l_hm, tc.scale(l_size, SIZE_WEIGHT)), tc.scale(l_off, OFFSET_WEIGHT))
    parts = LossParts(float(l_hm.data), float(l_size.data), float(l_off.data), float(total.data))
    if not np.isfinite(parts.total):
        raise tc.NumericError(f"non-finite detection loss: {parts}")
    return total, parts
