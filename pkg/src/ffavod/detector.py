"""Toy center-keypoint detector with temporal feature fusion.

Each frame goes through a small stride-4 backbone (and optional multiplicative
attention).  The fusion strategy merges the window's maps; the merged map
feeds only the center-heatmap head, while the size and offset heads read the
target frame's own map.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from . import tensor_core as tc
from .frame_window import CacheStats, FeatureCache, assemble_window, window_indices
from .fusion import FusionStrategy, make_fusion, save_fusion
from .tensor_core import ConvParams, Rng, ShapeError, Tensor, fftn

ATTENTIONS = ("none", "three_conv", "unet")
HEATMAP_PRIOR = 0.1


class ConfigError(ValueError):
    """Raised for inconsistent detector configurations or checkpoints."""


@dataclass(frozen=True)
class DetectorConfig:
    height: int = 64
    width: int = 64
    stride: int = 4
    channels: int = 32
    num_classes: int = 2
    attention: str = "none"
    unet_levels: int = 2
    fusion: str = "none"
    n: int = 0
    fusion_mode: str = "shared"
    fusion_bias: bool = False
    past_only: bool = False
    fusion_init: Optional[str] = None
    top_k: int = 50
    score_threshold: float = 0.05
    size_prior: float = 12.0

    def validate(self) -> "DetectorConfig":
        if self.stride != 4:
            raise ConfigError(f"the backbone has output stride 4, got stride={self.stride}")
        if self.channels < 2 or self.channels % 2:
            raise ConfigError(f"channels must be even and >= 2, got {self.channels}")
        if self.attention not in ATTENTIONS:
            raise ConfigError(f"unknown attention {self.attention!r}")
        div = self.stride * (2 ** self.unet_levels if self.attention == "unet" else 1)
        if self.height % div or self.width % div:
            raise ConfigError(f"input {self.height}x{self.width} must be divisible by {div}")
        if self.fusion == "none" and self.n != 0:
            raise ConfigError("fusion 'none' requires n = 0")
        if self.num_classes < 1 or self.top_k < 1:
            raise ConfigError("num_classes and top_k must be positive")
        return self

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return self.channels, self.height // self.stride, self.width // self.stride

    @property
    def target_index(self) -> int:
        return 2 * self.n if self.past_only else self.n

    def to_text(self) -> str:
        return " ".join(f"{k}={v}" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "DetectorConfig":
        raw = dict(item.split("=", 1) for item in text.split())
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            v = raw[f.name]
            if v == "None":
                kwargs[f.name] = None
            elif f.type in ("bool", bool):
                kwargs[f.name] = v == "True"
            elif f.type in ("int", int):
                kwargs[f.name] = int(v)
            elif f.type in ("float", float):
                kwargs[f.name] = float(v)
            else:
                kwargs[f.name] = v
        return cls(**kwargs)


@dataclass
class HeadOutputs:
    heatmap: Tensor
    size: Tensor
    offset: Tensor


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]


# ----------------------------------------------------------------------------
# building blocks

def apply_attention(feat: Tensor, saliency: Tensor) -> Tensor:
    if saliency.shape[-2:] != feat.shape[-2:] or saliency.shape[-3] != 1:
        raise ShapeError(f"saliency {saliency.shape} does not match features {feat.shape}")
    return tc.mul(feat, saliency)


def attention_three_conv(feat: Tensor, layers: dict[str, ConvParams]) -> Tensor:
    x = tc.relu(tc.conv2d(feat, layers["attention.conv1"]))
    x = tc.relu(tc.conv2d(x, layers["attention.conv2"]))
    return tc.sigmoid(tc.conv2d(x, layers["attention.conv3"]))


def attention_unet(feat: Tensor, layers: dict[str, ConvParams], levels: int,
                   trace: Optional[list] = None) -> Tensor:
    """U-Net saliency: ``levels`` conv+pool stages doubling channels, then mirrored decoding."""
    h, w = feat.shape[-2:]
    if h % (2 ** levels) or w % (2 ** levels):
        raise ShapeError(f"features {h}x{w} cannot be halved {levels} times")
    skips = []
    x = feat
    for k in range(1, levels + 1):
        e = tc.relu(tc.conv2d(x, layers[f"attention.enc{k}"]))
        skips.append(e)
        x = tc.maxpool2x(e)
        if trace is not None:
            trace.append(("enc", k, e.shape, x.shape))
    for k in range(levels, 0, -1):
        up = tc.upsample2x_nearest(x)
        x = tc.relu(tc.conv2d(tc.concat_channels([up, skips[k - 1]]), layers[f"attention.dec{k}"]))
        if trace is not None:
            trace.append(("dec", k, x.shape))
    return tc.sigmoid(tc.conv2d(x, layers["attention.out"]))


def decode(heatmap: np.ndarray, size: np.ndarray, offset: np.ndarray, cfg: DetectorConfig) -> list[Detection]:
    """Peaks of one image's K x h x w heatmap -> boxes in input pixels.

    A peak is a cell equal to the max of its 3x3 neighbourhood; candidates
    above the score threshold are ranked by score, then row, column and class.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    k, h, w = hm.shape
    pooled = ndimage.maximum_filter(hm, size=(1, 3, 3), mode="constant", cval=-np.inf)
    cls, row, col = np.nonzero((hm == pooled) & (hm > cfg.score_threshold))
    scores = hm[cls, row, col]
    order = np.lexsort((cls, col, row, -scores))
    R = cfg.stride
    out: list[Detection] = []
    for i in order:
        c, y, x = cls[i], row[i], col[i]
        cx = (x + float(offset[0, y, x])) * R
        cy = (y + float(offset[1, y, x])) * R
        bw, bh = float(size[0, y, x]), float(size[1, y, x])
        x0 = min(max(cx - bw / 2, 0.0), cfg.width)
        x1 = min(max(cx + bw / 2, 0.0), cfg.width)
        y0 = min(max(cy - bh / 2, 0.0), cfg.height)
        y1 = min(max(cy + bh / 2, 0.0), cfg.height)
        if x0 >= x1 or y0 >= y1:
            continue
        out.append(Detection(int(c), float(scores[i]), (x0, y0, x1, y1)))
        if len(out) == cfg.top_k:
            break
    return out


# ----------------------------------------------------------------------------
# model

class Detector:
    def __init__(self, cfg: DetectorConfig, seed: int = 0, fusion: Optional[FusionStrategy] = None):
        self.cfg = cfg.validate()
        self.seed = seed
        self.layers: dict[str, ConvParams] = {}
        self.capture: Optional[dict] = None
        rng = Rng(seed)
        c, K = cfg.channels, cfg.num_classes

        self._conv(rng, "backbone.conv1", 3, c // 2, 3, stride=2)
        self._conv(rng, "backbone.conv2", c // 2, c, 3, stride=2)
        self._conv(rng, "backbone.res1", c, c, 3)
        self._conv(rng, "backbone.res2", c, c, 3)

        if cfg.attention == "three_conv":
            self._conv(rng, "attention.conv1", c, c, 3)
            self._conv(rng, "attention.conv2", c, c, 3)
            self._conv(rng, "attention.conv3", c, 1, 3)
        elif cfg.attention == "unet":
            for k in range(1, cfg.unet_levels + 1):
                self._conv(rng, f"attention.enc{k}", c * 2 ** (k - 1), c * 2 ** k, 3)
            for k in range(cfg.unet_levels, 0, -1):
                self._conv(rng, f"attention.dec{k}", c * 2 ** (k + 1), c * 2 ** (k - 1), 3)
            self._conv(rng, "attention.out", c, 1, 3)

        self._conv(rng, "heads.hm1", c, c, 3)
        self._conv(rng, "heads.hm2", c, K, 1, bias=-math.log((1 - HEATMAP_PRIOR) / HEATMAP_PRIOR))
        self._conv(rng, "heads.size1", c, c, 3)
        self._conv(rng, "heads.size2", c, 2, 1, bias=cfg.size_prior)
        self._conv(rng, "heads.off1", c, c, 3)
        self._conv(rng, "heads.off2", c, 2, 1, bias=0.5)

        if fusion is None:
            fusion = make_fusion(cfg.fusion, cfg.n, c, init_mode=cfg.fusion_init, rng=rng.spawn(7),
                                 mode=cfg.fusion_mode, bias=cfg.fusion_bias, past_only=cfg.past_only)
        if fusion.n != cfg.n or fusion.past_only != cfg.past_only:
            raise ConfigError("fusion strategy window does not match the config")
        self.fusion = fusion

    def _conv(self, rng: Rng, name: str, cin: int, cout: int, k: int, stride: int = 1, bias: float = 0.0):
        w = rng.normal((cout, cin, k, k), std=math.sqrt(2.0 / (cin * k * k)))
        self.layers[name] = ConvParams(
            Tensor(w, requires_grad=True, name=f"{name}.weight"),
            Tensor(np.full(cout, bias), requires_grad=True, name=f"{name}.bias"),
            stride=stride, padding=k // 2,
        )

    # -- parameters -----------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, p in self.layers.items():
            out[f"{name}.weight"] = p.weight
            if p.bias is not None:
                out[f"{name}.bias"] = p.bias
        out.update(self.fusion.parameters())
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into matching parameters; returns names that were not found in ``state``."""
        params = self.parameters()
        missing = [k for k in params if k not in state]
        if strict and (missing or set(state) - set(params)):
            raise ConfigError(f"state mismatch: missing {missing}, unexpected {sorted(set(state) - set(params))}")
        for k, t in params.items():
            if k in state:
                if state[k].shape != t.shape:
                    raise ConfigError(f"{k}: checkpoint shape {state[k].shape} != model shape {t.shape}")
                t.data = np.ascontiguousarray(state[k], dtype=t.data.dtype)
        return missing

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    # -- forward pieces ---------------------------------------------------------

    def backbone_forward(self, frames: Tensor) -> Tensor:
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ShapeError(f"backbone expects N x 3 x H x W frames, got {frames.shape}")
        if frames.shape[2] % self.cfg.stride or frames.shape[3] % self.cfg.stride:
            raise ShapeError(f"frame extents {frames.shape[2:]} not divisible by stride {self.cfg.stride}")
        L = self.layers
        x = tc.relu(tc.conv2d(frames, L["backbone.conv1"]))
        x = tc.relu(tc.conv2d(x, L["backbone.conv2"]))
        x = tc.relu(tc.add(tc.conv2d(x, L["backbone.res1"]), x))
        x = tc.relu(tc.add(tc.conv2d(x, L["backbone.res2"]), x))
        return x

    def saliency(self, feat: Tensor, trace: Optional[list] = None) -> Optional[Tensor]:
        if self.cfg.attention == "three_conv":
            return attention_three_conv(feat, self.layers)
        if self.cfg.attention == "unet":
            return attention_unet(feat, self.layers, self.cfg.unet_levels, trace)
        return None

    def attend(self, feat: Tensor) -> Tensor:
        sal = self.saliency(feat)
        return feat if sal is None else apply_attention(feat, sal)

    def frame_features(self, frames: Tensor) -> Tensor:
        """Per-frame map that the cache stores: backbone output times saliency."""
        return self.attend(self.backbone_forward(frames))

    def heads_forward(self, fused: Tensor, target: Tensor) -> HeadOutputs:
        if fused.shape != target.shape:
            raise ShapeError(f"fused {fused.shape} and target {target.shape} maps differ")
        if self.capture is not None:
            self.capture["heatmap_input"] = fused.data.copy()
            self.capture["regression_input"] = target.data.copy()
        L = self.layers
        hm = tc.sigmoid(tc.conv2d(tc.relu(tc.conv2d(fused, L["heads.hm1"])), L["heads.hm2"]))
        size = tc.conv2d(tc.relu(tc.conv2d(target, L["heads.size1"])), L["heads.size2"])
        off = tc.conv2d(tc.relu(tc.conv2d(target, L["heads.off1"])), L["heads.off2"])
        return HeadOutputs(hm, size, off)

    def forward_maps(self, maps: Sequence[Tensor]) -> HeadOutputs:
        """Heads over a window of already-computed per-frame maps."""
        fused = self.fusion(maps)
        return self.heads_forward(fused, maps[self.fusion.target_index])

    def forward_frames(self, window: Sequence[Tensor]) -> HeadOutputs:
        """Full forward from raw frames; ``window`` holds one N x 3 x H x W batch per window slot."""
        maps = [self.frame_features(f) for f in window]
        return self.forward_maps(maps)

    # -- inference --------------------------------------------------------------

    def decode(self, outputs: HeadOutputs, index: int = 0) -> list[Detection]:
        return decode(outputs.heatmap.data[index], outputs.size.data[index], outputs.offset.data[index], self.cfg)

    def detect_frame(self, cache: Optional[FeatureCache], frames: np.ndarray, t: int,
                     stats: Optional[CacheStats] = None) -> list[Detection]:
        """Detections for frame ``t`` of a T x 3 x H x W sequence.

        With ``cache=None`` every window slot is recomputed (and counted in
        ``stats`` when given).
        """
        T = frames.shape[0]

        def compute(i: int) -> Tensor:
            return self.frame_features(Tensor(frames[i:i + 1]))

        with tc.no_grad():
            if cache is not None:
                maps = assemble_window(cache, t, self.cfg.n, T, compute, self.cfg.past_only)
            else:
                win = window_indices(t, self.cfg.n, T, self.cfg.past_only)
                maps = [compute(i) for i in win.indices]
                if stats is not None:
                    stats.computes += len(maps)
            return self.decode(self.forward_maps(maps))

    def detect_sequence(self, frames: np.ndarray, cache: bool = True) -> tuple[list[list[Detection]], CacheStats]:
        if frames.shape[0] == 0:
            return [], CacheStats()
        if cache:
            fc = FeatureCache.for_window(self.cfg.n)
            dets = [self.detect_frame(fc, frames, t) for t in range(frames.shape[0])]
            return dets, fc.stats
        stats = CacheStats()
        return [self.detect_frame(None, frames, t, stats) for t in range(frames.shape[0])], stats


def detect_frame(detector: Detector, cache: Optional[FeatureCache], frames: np.ndarray, t: int) -> list[Detection]:
    return detector.detect_frame(cache, frames, t)


# ----------------------------------------------------------------------------
# checkpoints: one FFTN file per parameter plus a plain-text manifest

MANIFEST = "manifest.txt"


def save_checkpoint(detector: Detector, directory: Union[str, Path], extra: Optional[dict] = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"config {detector.cfg.to_text()}", f"seed {detector.seed}"]
    for k, v in (extra or {}).items():
        lines.append(f"meta {k}={v}")
    for name, t in detector.parameters().items():
        fname = f"{name}.fftn"
        fftn.save(d / fname, t.data.astype(np.float32))
        lines.append(f"param {name} {fname} {'x'.join(map(str, t.shape))}")
    save_fusion(d, detector.fusion)
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    return d


def read_manifest(directory: Union[str, Path]) -> tuple[DetectorConfig, dict[str, str], dict[str, str]]:
    d = Path(directory)
    path = d / MANIFEST
    if not path.exists():
        raise ConfigError(f"{d} is not a checkpoint (missing {MANIFEST})")
    cfg, files, meta = None, {}, {}
    for line in path.read_text().splitlines():
        kind, _, rest = line.partition(" ")
        if kind == "config":
            cfg = DetectorConfig.from_text(rest)
        elif kind == "param":
            name, fname, _ = rest.split()
            files[name] = fname
        elif kind == "meta":
            k, _, v = rest.partition("=")
            meta[k] = v
        elif kind == "seed":
            meta["seed"] = rest
    if cfg is None:
        raise ConfigError(f"{path}: no config line")
    return cfg, files, meta


def load_state(directory: Union[str, Path]) -> dict[str, np.ndarray]:
    _, files, _ = read_manifest(directory)
    return {name: fftn.load(Path(directory) / fname) for name, fname in files.items()}


def load_checkpoint(directory: Union[str, Path], **overrides) -> Detector:
    """Rebuild a detector from a checkpoint.

    ``overrides`` replace config fields (e.g. a different fusion window);
    parameters absent from the checkpoint keep their fresh initialization.
    """
    cfg, _, meta = read_manifest(directory)
    strict = not overrides
    cfg = replace(cfg, **overrides)
    det = Detector(cfg, seed=int(meta.get("seed", 0)))
    det.load_state(load_state(directory), strict=strict)
    return det


def state_digest(state: dict[str, np.ndarray], names: Optional[Callable[[str], bool]] = None) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        if names is None or names(k):
            h.update(k.encode())
            h.update(np.ascontiguousarray(state[k]).tobytes())
    return h.hexdigest()
