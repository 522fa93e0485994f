"""Train/evaluate orchestration: fusion-strategy ablation and the window-size sweep."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .detector import Detector, DetectorConfig
from .evaluation import DEFAULT_IOU, EvalReport, evaluate
from .synth_video import Dataset, Sequence as VideoSequence
from .trainer import TrainConfig, TrainResult, train_stage1, train_stage2

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    """One ablation row: fusion tag, half-window, and window placement."""

    label: str
    tag: str
    n: int
    past_only: bool = False


ABLATION_VARIANTS = (
    Variant("learned", "learned", 2),
    Variant("none", "none", 0),
    Variant("max", "max", 2),
    Variant("mean", "mean", 2),
    Variant("median", "median", 2),
    Variant("concat_conv", "concat_conv", 2),
    Variant("learned_past_only", "learned", 2, past_only=True),
    Variant("learned_past_only", "learned", 1, past_only=True),
)


@dataclass(frozen=True)
class ExperimentConfig:
    channels: int = 32
    attention: str = "none"
    stage1_epochs: int = 20
    stage2_epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    iou_threshold: float = DEFAULT_IOU

    def detector_config(self, **kw) -> DetectorConfig:
        return DetectorConfig(channels=self.channels, attention=self.attention, **kw).validate()


def frame_size(dataset: Dataset) -> dict:
    """Detector height/width matching the dataset's frames."""
    for seq in dataset.sequences():
        if seq.length:
            return {"height": seq.frames.shape[2], "width": seq.frames.shape[3]}
    raise ValueError("dataset contains no frames")


def sequence_detections(detector: Detector, seqs: Sequence[VideoSequence], cache: bool = True):
    """Run inference; returns ({(seq, frame): [(cls, score, box)]}, per-sequence cache stats rows)."""
    dets: dict[tuple[str, int], list] = {}
    stats = []
    for seq in seqs:
        per_frame, st = detector.detect_sequence(seq.frames, cache=cache)
        for t, frame_dets in enumerate(per_frame):
            dets[(seq.sequence_id, t)] = [(d.class_id, d.score, d.box) for d in frame_dets]
        stats.append({"sequence_id": seq.sequence_id, "frames": seq.length, **st.as_row()})
    return dets, stats


def ground_truth(seqs: Sequence[VideoSequence]) -> dict[tuple[str, int], list]:
    return {(s.sequence_id, t): [(b.cls, b.box) for b in frame] for s in seqs for t, frame in enumerate(s.gt)}


def evaluate_detector(detector: Detector, seqs: Sequence[VideoSequence], iou_threshold: float = DEFAULT_IOU,
                      cache: bool = True) -> EvalReport:
    dets, _ = sequence_detections(detector, seqs, cache)
    classes = range(detector.cfg.num_classes)
    return evaluate(dets, ground_truth(seqs), iou_threshold, classes=classes)


def stage1(dataset: Dataset, seed: int, exp: ExperimentConfig) -> tuple[Detector, TrainResult]:
    det = Detector(exp.detector_config(**frame_size(dataset)), seed=seed)
    res = train_stage1(det, dataset, TrainConfig(epochs=exp.stage1_epochs, batch_size=exp.batch_size,
                                                 lr=exp.lr, seed=seed))
    return det, res


def stage2(dataset: Dataset, stage1_state: dict, variant: Variant, seed: int,
           exp: ExperimentConfig) -> tuple[Detector, TrainResult]:
    cfg = exp.detector_config(fusion=variant.tag, n=variant.n, past_only=variant.past_only, **frame_size(dataset))
    det = Detector(cfg, seed=seed)
    res = train_stage2(det, dataset, TrainConfig(stage="fusion", epochs=exp.stage2_epochs,
                                                 batch_size=exp.batch_size, lr=exp.lr, seed=seed), stage1_state)
    return det, res


def _baseline(dataset: Dataset, seed: int, exp: ExperimentConfig,
              stage1_state: Optional[dict]) -> tuple[Detector, dict, int]:
    if stage1_state is None:
        base, res = stage1(dataset, seed, exp)
        return base, res.state, res.best_epoch
    base = Detector(exp.detector_config(**frame_size(dataset)), seed=seed)
    base.load_state(stage1_state)
    return base, stage1_state, 0


def run_ablation(dataset: Dataset, seeds: Sequence[int], exp: ExperimentConfig,
                 variants: Sequence[Variant] = ABLATION_VARIANTS, stage1_state: Optional[dict] = None) -> list[dict]:
    """Per (variant, seed) test mAP.  The ``none`` row is the stage-1 model itself.

    Without ``stage1_state`` each seed trains its own stage-1 model;
    with it, all seeds share those weights and differ only in stage 2.
    """
    rows = []
    test = dataset.sequences("test")
    for seed in seeds:
        t0 = time.perf_counter()
        base, state, base_epoch = _baseline(dataset, seed, exp, stage1_state)
        base_map = evaluate_detector(base, test, exp.iou_threshold).map
        for v in variants:
            if v.tag == "none":
                m, best_epoch = base_map, base_epoch
            else:
                det, res = stage2(dataset, state, v, seed, exp)
                m, best_epoch = evaluate_detector(det, test, exp.iou_threshold).map, res.best_epoch
            rows.append({"strategy": v.label, "n": v.n, "seed": seed, "map": m, "best_epoch": best_epoch})
            log.info("seed %d %s n=%d mAP %.4f", seed, v.label, v.n, m)
        log.info("seed %d done in %.1fs", seed, time.perf_counter() - t0)
    return rows


def run_sweep(dataset: Dataset, max_n: int, seed: int, exp: ExperimentConfig,
              stage1_state: Optional[dict] = None) -> list[dict]:
    """Test mAP for learned fusion with n = 0..max_n; n = 0 is the stage-1 baseline."""
    test = dataset.sequences("test")
    base, stage1_state, _ = _baseline(dataset, seed, exp, stage1_state)
    rows = [{"n": 0, "map": evaluate_detector(base, test, exp.iou_threshold).map}]
    for n in range(1, max_n + 1):
        det, _ = stage2(dataset, stage1_state, Variant("learned", "learned", n), seed, exp)
        rows.append({"n": n, "map": evaluate_detector(det, test, exp.iou_threshold).map})
    return rows


def summarize_ablation(rows: Sequence[dict]) -> list[dict]:
    """Mean and spread (sample std) of mAP per (strategy, n), in first-seen order."""
    keys: list[tuple[str, int]] = []
    for r in rows:
        if (r["strategy"], r["n"]) not in keys:
            keys.append((r["strategy"], r["n"]))
    out = []
    for label, n in keys:
        vals = np.array([r["map"] for r in rows if r["strategy"] == label and r["n"] == n])
        spread = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append({"strategy": label, "n": n, "map_mean": float(vals.mean()), "map_spread": spread,
                    "seeds": len(vals)})
    return out


def rows_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
