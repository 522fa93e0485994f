"""Detection metrics: IoU matching, all-points average precision and mAP."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

Box = Sequence[float]
DEFAULT_IOU = 0.7
INTERPOLATION = "all_points"
DET_COLUMNS = ("sequence_id", "frame_id", "class_id", "score", "x_min", "y_min", "x_max", "y_max")


def _check_box(b: Box) -> None:
    if not (b[0] < b[2] and b[1] < b[3]):
        raise ValueError(f"degenerate box {tuple(b)}")


def iou(a: Box, b: Box) -> float:
    _check_box(a)
    _check_box(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


@dataclass
class MatchResult:
    scores: np.ndarray
    matched: np.ndarray
    gt_count: int

    @classmethod
    def empty(cls) -> "MatchResult":
        return cls(np.zeros(0), np.zeros(0, dtype=bool), 0)

    @classmethod
    def concat(cls, parts: Iterable["MatchResult"]) -> "MatchResult":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.scores for p in parts]),
                   np.concatenate([p.matched for p in parts]),
                   sum(p.gt_count for p in parts))


def match_detections(dets: Sequence[tuple[float, Box]], gts: Sequence[Box],
                     iou_threshold: float = DEFAULT_IOU) -> MatchResult:
    """Greedy matching of one class in one frame.

    Detections are visited by descending score (ties in input order); each
    takes the still-unmatched ground truth of highest IoU >= threshold.
    Results are returned in visiting order.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou threshold must be in (0, 1), got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: -dets[i][0])
    taken = [False] * len(gts)
    scores = np.array([dets[i][0] for i in order], dtype=np.float64)
    matched = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(dets[i][1], g)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            matched[rank] = True
    return MatchResult(scores, matched, len(gts))


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    scores: np.ndarray
    ap: float


def average_precision(matches: Union[MatchResult, Iterable[MatchResult]]) -> Optional[PrCurve]:
    """Area under the precision/recall curve with all-points interpolation.

    Returns ``None`` when there is no ground truth (class absent).
    """
    m = matches if isinstance(matches, MatchResult) else MatchResult.concat(matches)
    if m.gt_count == 0:
        return None
    order = np.argsort(-m.scores, kind="stable")
    tp = np.cumsum(m.matched[order])
    fp = np.cumsum(~m.matched[order])
    recall = tp / m.gt_count
    precision = tp / np.maximum(tp + fp, 1)
    # monotone envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    prev = np.concatenate([[0.0], recall[:-1]])
    ap = float(np.sum((recall - prev) * envelope))
    return PrCurve(recall, precision, m.scores[order], min(max(ap, 0.0), 1.0))


def mean_average_precision(curves: Mapping[Hashable, Optional[PrCurve]]) -> float:
    present = [c.ap for c in curves.values() if c is not None]
    if not present:
        raise ValueError("no class has ground truth")
    return float(np.mean(present))


@dataclass
class EvalReport:
    curves: dict[int, Optional[PrCurve]]
    gt_counts: dict[int, int]
    iou_threshold: float
    map: float = field(init=False)

    def __post_init__(self):
        self.map = mean_average_precision(self.curves)


def evaluate(detections: Mapping[Hashable, Sequence[tuple[int, float, Box]]],
             ground_truth: Mapping[Hashable, Sequence[tuple[int, Box]]],
             iou_threshold: float = DEFAULT_IOU,
             classes: Optional[Iterable[int]] = None) -> EvalReport:
    """Per-class AP and mAP over all frames.

    ``detections`` maps a frame key to ``(class_id, score, box)`` tuples and
    ``ground_truth`` maps the same keys to ``(class_id, box)`` tuples.
    Detections on frames without a ground-truth entry count as false positives.
    """
    keys = list(ground_truth) + [k for k in detections if k not in ground_truth]
    cls_set = set(classes) if classes is not None else (
        {c for k in keys for c, _ in ground_truth.get(k, ())} | {d[0] for k in keys for d in detections.get(k, ())})
    per_class: dict[int, list[MatchResult]] = {c: [] for c in sorted(cls_set)}
    for key in keys:
        dets = detections.get(key, ())
        gts = ground_truth.get(key, ())
        for c in per_class:
            per_class[c].append(match_detections(
                [(d[1], d[2]) for d in dets if d[0] == c], [g[1] for g in gts if g[0] == c], iou_threshold))
    curves = {c: average_precision(parts) for c, parts in per_class.items()}
    counts = {c: sum(p.gt_count for p in parts) for c, parts in per_class.items()}
    return EvalReport(curves, counts, iou_threshold)


# ----------------------------------------------------------------------------
# CSV interfaces

def _fmt(x: float) -> str:
    return repr(float(x))


def detections_csv(rows: Iterable[tuple]) -> str:
    """Rows are (sequence_id, frame_id, class_id, score, x_min, y_min, x_max, y_max)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DET_COLUMNS)
    for seq, frame, cls, score, *box in rows:
        w.writerow([seq, frame, cls, _fmt(score)] + [_fmt(v) for v in box])
    return buf.getvalue()


def read_detections_csv(path: Union[str, Path]) -> dict[tuple[str, int], list[tuple[int, float, tuple]]]:
    out: dict[tuple[str, int], list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row.get("sequence_id", "0"), int(row["frame_id"]))
            box = tuple(float(row[k]) for k in ("x_min", "y_min", "x_max", "y_max"))
            out.setdefault(key, []).append((int(row["class_id"]), float(row["score"]), box))
    return out


def metrics_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("class", "ap", "gt_count"))
    for c, curve in report.curves.items():
        w.writerow((c, "" if curve is None else _fmt(curve.ap), report.gt_counts[c]))
    w.writerow(("mAP", _fmt(report.map), sum(report.gt_counts.values())))
    return buf.getvalue()


def metrics_metadata(report: EvalReport) -> str:
    return f"interpolation={INTERPOLATION} iou_threshold={report.iou_threshold}\n"


def pr_curve_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("class", "rank", "score", "recall", "precision"))
    for c, curve in report.curves.items():
        if curve is None:
            continue
        for i, (s, r, p) in enumerate(zip(curve.scores, curve.recall, curve.precision)):
            w.writerow((c, i, _fmt(s), _fmt(r), _fmt(p)))
    return buf.getvalue()
