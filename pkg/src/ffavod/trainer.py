"""Optimizers and the two-stage training protocol.

Stage 1 trains the single-frame detector end to end.  Stage 2 starts from the
stage-1 weights, freezes the backbone, and trains fusion, attention and heads
on windows of ``2n+1`` frames.  Both stages keep the weights with the lowest
validation loss, where epoch 0 is the untrained starting point.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor_core as tc
from .detector import Detector, HeadOutputs
from .frame_window import window_indices
from .losses import detection_loss
from .synth_video import Dataset, Sequence as VideoSequence
from .targets import GroundTruthTargets, build_targets, stack_targets
from .tensor_core import Rng, Tensor

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e4


class DivergenceError(RuntimeError):
    """Raised when the training loss blows up or becomes non-finite."""


@dataclass
class TrainConfig:
    stage: str = "single_frame"  # or "fusion"
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"  # or "sgd" (momentum 0.9)
    freeze: tuple[str, ...] = ()
    unfreeze: bool = False
    seed: int = 0
    halve_on_plateau: int = 0

    def __post_init__(self):
        if self.stage not in ("single_frame", "fusion"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.stage == "fusion" and not self.freeze and not self.unfreeze:
            self.freeze = ("backbone",)
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.betas, self.eps = params, lr, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


class SGD:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-2, momentum: float = 0.9):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.buf = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.buf[k] = self.momentum * self.buf[k] + p.grad
            p.data = (p.data - self.lr * self.buf[k]).astype(p.data.dtype)


def trainable(detector: Detector, freeze: Sequence[str]) -> dict[str, Tensor]:
    """Mark frozen parameters (by name prefix) as not requiring grad; return the rest."""
    out = {}
    for name, t in detector.parameters().items():
        frozen = any(name == f or name.startswith(f + ".") for f in freeze)
        t.requires_grad = not frozen
        if not frozen:
            out[name] = t
    return out


# ----------------------------------------------------------------------------
# batching

@dataclass
class Sample:
    seq: int
    t: int


def sequence_targets(seq: VideoSequence, detector: Detector) -> list[GroundTruthTargets]:
    cfg = detector.cfg
    return [build_targets([(b.cls, b.box) for b in frame], cfg.num_classes, cfg.height, cfg.width, cfg.stride)
            for frame in seq.gt]


class WindowFeed:
    """Produces (head outputs, targets) for batches of target frames of a sequence set.

    When the backbone is frozen its per-frame outputs are computed once up
    front; otherwise every batch runs the backbone with gradients.
    """

    def __init__(self, detector: Detector, seqs: Sequence[VideoSequence], backbone_frozen: bool):
        self.detector = detector
        self.seqs = list(seqs)
        self.targets = [sequence_targets(s, detector) for s in self.seqs]
        self.samples = [Sample(i, t) for i, s in enumerate(self.seqs) for t in range(s.length)]
        self.features: Optional[list[np.ndarray]] = None
        if backbone_frozen:
            self.features = []
            with tc.no_grad():
                for s in self.seqs:
                    chunks = [detector.backbone_forward(Tensor(s.frames[i:i + 40])).data
                              for i in range(0, s.length, 40)]
                    self.features.append(np.concatenate(chunks))

    def forward(self, batch: Sequence[Sample]) -> tuple[HeadOutputs, GroundTruthTargets]:
        det = self.detector
        cfg = det.cfg
        windows = [window_indices(s.t, cfg.n, self.seqs[s.seq].length, cfg.past_only).indices for s in batch]
        slots = range(2 * cfg.n + 1)
        if self.features is not None:
            maps = [det.attend(Tensor(np.stack([self.features[s.seq][w[k]] for s, w in zip(batch, windows)])))
                    for k in slots]
            out = det.forward_maps(maps)
        else:
            frames = [Tensor(np.stack([self.seqs[s.seq].frames[w[k]] for s, w in zip(batch, windows)]))
                      for k in slots]
            out = det.forward_frames(frames)
        return out, stack_targets([self.targets[s.seq][s.t] for s in batch])

    def batches(self, batch_size: int, order: Optional[np.ndarray] = None) -> list[list[Sample]]:
        idx = np.arange(len(self.samples)) if order is None else order
        return [[self.samples[i] for i in idx[j:j + batch_size]] for j in range(0, len(idx), batch_size)]


def validation_loss(feed: WindowFeed, batch_size: int) -> float:
    """Mean batch loss over the feed in fixed order."""
    losses = []
    with tc.no_grad():
        for batch in feed.batches(batch_size):
            out, tgt = feed.forward(batch)
            losses.append(detection_loss(out, tgt)[1].total)
    return float(np.mean(losses)) if losses else float("nan")


# ----------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    state: dict[str, np.ndarray]
    best_epoch: int
    best_val: float
    curve: list[tuple[int, float, float]] = field(default_factory=list)
    trained_sequences: set[str] = field(default_factory=set)

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "val_loss"))
        for e, tr, va in self.curve:
            w.writerow((e, "" if np.isnan(tr) else repr(tr), repr(va)))
        return buf.getvalue()


def train(detector: Detector, dataset: Dataset, cfg: TrainConfig,
          on_epoch: Optional[Callable[[int, float, float], None]] = None) -> TrainResult:
    """Optimize ``detector`` in place, then load the best-validation weights into it."""
    train_seqs, val_seqs = dataset.sequences("train"), dataset.sequences("val")
    overlap = {s.sequence_id for s in train_seqs} & {s.sequence_id for s in val_seqs}
    if overlap:
        raise ValueError(f"train and validation share sequences: {sorted(overlap)}")
    if not train_seqs:
        raise ValueError("no training sequences")

    params = trainable(detector, cfg.freeze)
    backbone_frozen = all(not t.requires_grad for k, t in detector.parameters().items() if k.startswith("backbone."))
    train_feed = WindowFeed(detector, train_seqs, backbone_frozen)
    val_feed = WindowFeed(detector, val_seqs, backbone_frozen) if val_seqs else None
    opt = Adam(params, cfg.lr) if cfg.optimizer == "adam" else SGD(params, cfg.lr)
    rng = Rng(cfg.seed).spawn(0x7EA1)

    def val() -> float:
        return validation_loss(val_feed, cfg.batch_size) if val_feed else float("nan")

    best_val = val()
    result = TrainResult(detector.state(), 0, best_val, [(0, float("nan"), best_val)])
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_feed.samples))
        losses = []
        for batch in train_feed.batches(cfg.batch_size, order):
            detector.zero_grad()
            try:
                out, tgt = train_feed.forward(batch)
                loss, parts = detection_loss(out, tgt)
            except tc.NumericError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
            if parts.total > DIVERGENCE_LIMIT:
                raise DivergenceError(f"epoch {epoch}: loss {parts.total:.3g} exceeds {DIVERGENCE_LIMIT:g} ({parts})")
            loss.backward()
            opt.step()
            losses.append(parts.total)
            result.trained_sequences.update(train_feed.seqs[s.seq].sequence_id for s in batch)
        train_loss = float(np.mean(losses))
        v = val()
        result.curve.append((epoch, train_loss, v))
        log.info("epoch %d train %.4f val %.4f", epoch, train_loss, v)
        if on_epoch:
            on_epoch(epoch, train_loss, v)
        if v < result.best_val or np.isnan(result.best_val):
            result.best_val, result.best_epoch, result.state = v, epoch, detector.state()
            stale = 0
        else:
            stale += 1
            if cfg.halve_on_plateau and stale >= cfg.halve_on_plateau:
                opt.lr /= 2
                stale = 0

    detector.load_state(result.state)
    for t in detector.parameters().values():
        t.requires_grad = True
        t.grad = None
    return result


def train_stage1(detector: Detector, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    if cfg.stage != "single_frame":
        raise ValueError("stage 1 needs stage='single_frame'")
    if detector.cfg.n != 0:
        raise ValueError("stage 1 trains the single-frame detector (n = 0)")
    return train(detector, dataset, cfg)


def train_stage2(detector: Detector, dataset: Dataset, cfg: TrainConfig,
                 stage1_state: dict[str, np.ndarray]) -> TrainResult:
    """Fusion stage: load stage-1 weights (fusion keeps its own init) and train with the backbone frozen."""
    if cfg.stage != "fusion":
        raise ValueError("stage 2 needs stage='fusion'")
    if not cfg.freeze and not cfg.unfreeze:
        raise ValueError("stage 2 needs a non-empty freeze set")
    if detector.cfg.n < 1:
        raise ValueError("stage 2 needs a fusion window with n >= 1")
    detector.load_state({k: v for k, v in stage1_state.items() if not k.startswith("fusion.")}, strict=False)
    return train(detector, dataset, cfg)
