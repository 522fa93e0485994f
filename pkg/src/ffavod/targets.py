"""Center-keypoint training targets."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class GroundTruthTargets:
    heatmap: np.ndarray  # K x h x w in [0, 1]
    size: np.ndarray     # 2 x h x w, (width, height) in input pixels
    offset: np.ndarray   # 2 x h x w, fractional centre remainder (x, y)
    mask: np.ndarray     # h x w bool, object-centre cells

    @property
    def num_objects(self) -> int:
        return int(self.mask.sum())


def gaussian_radius(box_w: float, box_h: float, stride: int) -> float:
    return max(1.0, min(box_w, box_h) / (2 * stride))


def splat(heatmap: np.ndarray, cx: int, cy: int, radius: float) -> None:
    """Max-combine a unit-peak Gaussian centred on cell (cx, cy) into ``heatmap`` (h x w)."""
    h, w = heatmap.shape
    sigma = (2 * radius + 1) / 6
    r = int(math.ceil(radius))
    ys = np.arange(max(0, cy - r), min(h, cy + r + 1))
    xs = np.arange(max(0, cx - r), min(w, cx + r + 1))
    g = np.exp(-((ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2) / (2 * sigma ** 2))
    region = heatmap[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1]
    np.maximum(region, g.astype(heatmap.dtype), out=region)


def build_targets(boxes: Sequence[tuple[int, Sequence[float]]], num_classes: int, height: int, width: int,
                  stride: int) -> GroundTruthTargets:
    """Targets for one image from ``(class_id, (x_min, y_min, x_max, y_max))`` pairs."""
    h, w = height // stride, width // stride
    hm = np.zeros((num_classes, h, w), dtype=np.float32)
    size = np.zeros((2, h, w), dtype=np.float32)
    offset = np.zeros((2, h, w), dtype=np.float32)
    mask = np.zeros((h, w), dtype=bool)
    for cls, (x0, y0, x1, y1) in boxes:
        bw, bh = x1 - x0, y1 - y0
        if bw <= 0 or bh <= 0:
            raise ValueError(f"degenerate ground-truth box {(x0, y0, x1, y1)}")
        if not 0 <= cls < num_classes:
            raise ValueError(f"class {cls} outside [0, {num_classes})")
        fx, fy = (x0 + x1) / 2 / stride, (y0 + y1) / 2 / stride
        cx, cy = min(int(fx), w - 1), min(int(fy), h - 1)
        splat(hm[cls], cx, cy, gaussian_radius(bw, bh, stride))
        size[:, cy, cx] = bw, bh
        offset[:, cy, cx] = fx - cx, fy - cy
        mask[cy, cx] = True
    return GroundTruthTargets(hm, size, offset, mask)


def stack_targets(items: Sequence[GroundTruthTargets]) -> GroundTruthTargets:
    return GroundTruthTargets(
        np.stack([t.heatmap for t in items]),
        np.stack([t.size for t in items]),
        np.stack([t.offset for t in items]),
        np.stack([t.mask for t in items]),
    )
