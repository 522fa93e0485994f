"""Temporal fusion of same-shape feature maps from a window of frames.

The learned fusion slices the ``2n+1`` input maps channel by channel, stacks
each channel's ``2n+1`` slices, convolves every stack with a 1x1 kernel of
depth ``2n+1`` and re-assembles the ``c`` single-channel results.  Because the
kernel is 1x1 this equals a per-position weighted sum over the frame axis, and
that is what :func:`fuse_learned` evaluates.  :func:`fuse_learned_literal`
keeps the regroup/convolve/re-order route for cross-checking.

Ablation baselines (mean, max, median, concatenation + 1x1 conv) share the
:class:`FusionStrategy` interface.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .tensor_core import (
    Context,
    ConvParams,
    Rng,
    ShapeError,
    Tensor,
    check_finite,
    concat_channels,
    conv2d,
    conv2d_forward,
    fftn,
    reduce_backward,
    reduce_forward,
)

TAGS = ("learned", "mean", "max", "median", "concat_conv", "none")
MODES = ("shared", "per_channel")
INIT_MODES = ("identity", "uniform", "seeded_random")


@dataclass
class FusionParams:
    n: int
    weights: Tensor
    mode: str = "shared"
    bias: Optional[Tensor] = None
    past_only: bool = False

    def __post_init__(self):
        if self.n < 0:
            raise ValueError(f"half-window n must be >= 0, got {self.n}")
        if self.mode not in MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        k = self.window
        if self.mode == "shared" and self.weights.shape != (k,):
            raise ShapeError(f"shared fusion weights must have shape ({k},), got {self.weights.shape}")
        if self.mode == "per_channel" and (self.weights.ndim != 2 or self.weights.shape[1] != k):
            raise ShapeError(f"per-channel fusion weights must have shape (c, {k}), got {self.weights.shape}")
        if self.bias is not None and self.bias.ndim != 1:
            raise ShapeError(f"fusion bias must be rank 1, got {self.bias.shape}")

    @property
    def window(self) -> int:
        return 2 * self.n + 1

    @property
    def target_index(self) -> int:
        return 2 * self.n if self.past_only else self.n


def _check_maps(maps: Sequence, window: int) -> tuple[int, ...]:
    if len(maps) != window:
        raise ShapeError(f"expected {window} feature maps, got {len(maps)}")
    shape = maps[0].shape
    if len(shape) < 3:
        raise ShapeError(f"feature maps must be c x h x w (optionally batched), got {shape}")
    for m in maps[1:]:
        if m.shape != shape:
            raise ShapeError(f"feature map shapes differ: {m.shape} vs {shape}")
    return shape


def _channel_view(w: np.ndarray) -> np.ndarray:
    # per-channel column broadcast against (..., c, h, w)
    return w.reshape((-1, 1, 1))


def fuse_learned_forward(maps: Sequence[np.ndarray], weights: np.ndarray, bias: Optional[np.ndarray] = None,
                         mode: str = "shared") -> tuple[np.ndarray, Context]:
    """Weighted sum over the frame axis; returns the output and a single-use context."""
    k = len(maps)
    shape = _check_maps(maps, k)
    c = shape[-3]
    dtype = maps[0].dtype
    w = np.asarray(weights, dtype=dtype)
    if mode == "shared" and w.shape != (k,):
        raise ShapeError(f"weights shape {w.shape} does not match {k} maps")
    if mode == "per_channel" and w.shape != (c, k):
        raise ShapeError(f"weights shape {w.shape} does not match ({c}, {k})")
    if bias is not None and np.shape(bias) != (c,):
        raise ShapeError(f"bias shape {np.shape(bias)} does not match {c} channels")

    # accumulate in window order so a one-hot kernel reproduces its map exactly
    out = np.zeros(shape, dtype=dtype)
    for i, m in enumerate(maps):
        coef = w[i] if mode == "shared" else _channel_view(w[:, i])
        out += coef * m
    if bias is not None:
        out += _channel_view(np.asarray(bias, dtype=dtype))
    check_finite(out, "fuse_learned")
    return out, Context("fuse_learned", maps=list(maps), weights=w, mode=mode, has_bias=bias is not None)


def fuse_learned_backward(ctx: Context, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray, Optional[np.ndarray]]:
    """Exact gradients of the weighted sum: (per-map grads, weight grad, bias grad)."""
    s = ctx.take()
    maps, w, mode = s["maps"], s["weights"], s["mode"]
    ndim = grad_out.ndim
    non_channel = tuple(i for i in range(ndim) if i != ndim - 3)
    grad_maps = []
    grad_w = np.zeros_like(w)
    for i, m in enumerate(maps):
        if mode == "shared":
            grad_maps.append(w[i] * grad_out)
            grad_w[i] = np.sum(m * grad_out)
        else:
            grad_maps.append(_channel_view(w[:, i]) * grad_out)
            grad_w[:, i] = np.sum(m * grad_out, axis=non_channel)
    grad_b = grad_out.sum(axis=non_channel) if s["has_bias"] else None
    return grad_maps, grad_w, grad_b


def fuse_learned(maps: Sequence[Tensor], p: FusionParams) -> Tensor:
    """Fuse ``2n+1`` maps (index ``p.target_index`` is the target frame) into one map of the same shape."""
    _check_maps(maps, p.window)
    bias = None if p.bias is None else p.bias.data
    out, ctx = fuse_learned_forward([m.data for m in maps], p.weights.data, bias, p.mode)
    parents = list(maps) + [p.weights] + ([p.bias] if p.bias is not None else [])

    def backward(g):
        gm, gw, gb = fuse_learned_backward(ctx, g)
        return tuple(gm) + (gw,) + ((gb,) if p.bias is not None else ())

    return Tensor.from_op(out, parents, backward, "fuse_learned")


def fuse_learned_literal(maps: Sequence[np.ndarray], weights: np.ndarray, bias: Optional[np.ndarray] = None,
                         mode: str = "shared") -> np.ndarray:
    """Same result as :func:`fuse_learned_forward`, computed the long way.

    Each channel's slices from all frames are concatenated into a
    (2n+1)-channel tensor, convolved with a 1x1x(2n+1) kernel of output depth
    one, and the ``c`` results are concatenated back channel-wise.
    """
    k = len(maps)
    shape = _check_maps(maps, k)
    batched = [m if m.ndim == 4 else m[None] for m in maps]
    c = shape[-3]
    dtype = maps[0].dtype
    w = np.asarray(weights, dtype=dtype)
    per_channel = []
    for ch in range(c):
        grouped = np.stack([m[:, ch] for m in batched], axis=1)  # N x (2n+1) x h x w
        kernel = (w if mode == "shared" else w[ch]).reshape(1, k, 1, 1)
        b = None if bias is None else np.asarray(bias, dtype=dtype)[ch:ch + 1]
        out, _ = conv2d_forward(grouped, kernel, b)
        per_channel.append(out)
    merged = np.concatenate(per_channel, axis=1)
    return merged if len(shape) == 4 else merged[0]


def frame_reduce(maps: Sequence[Tensor], how: str) -> Tensor:
    """Elementwise mean / max / median over the frame axis."""
    _check_maps(maps, len(maps))
    stacked = np.stack([m.data for m in maps])
    out, ctx = reduce_forward(stacked, 0, how)

    def backward(g):
        return tuple(reduce_backward(ctx, g))

    return Tensor.from_op(out, list(maps), backward, f"fuse_{how}")


def concat_conv(maps: Sequence[Tensor], p: ConvParams) -> Tensor:
    """Concatenate all maps channel-wise and mix them back to ``c`` channels with a 1x1 conv."""
    _check_maps(maps, len(maps))
    c = maps[0].shape[-3]
    if p.weight.shape[2:] != (1, 1) or p.in_channels != c * len(maps) or p.out_channels != c:
        raise ShapeError(f"concat_conv needs a 1x1 kernel {c}x{c * len(maps)}, got {p.weight.shape}")
    cat = concat_channels(maps)
    if cat.ndim == 3:
        raise ShapeError("concat_conv needs batched (rank-4) maps")
    return conv2d(cat, p)


@dataclass
class FusionStrategy:
    tag: str
    n: int
    params: Union[FusionParams, ConvParams, None] = None
    past_only: bool = False
    init_mode: str = field(default="identity", compare=False)

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown fusion tag {self.tag!r}")
        if self.tag == "none" and self.n != 0:
            raise ValueError("fusion 'none' is only valid with n = 0")
        if self.n < 0:
            raise ValueError(f"half-window n must be >= 0, got {self.n}")

    @property
    def window(self) -> int:
        return 2 * self.n + 1

    @property
    def target_index(self) -> int:
        return 2 * self.n if self.past_only else self.n

    def __call__(self, maps: Sequence[Tensor]) -> Tensor:
        return fuse(maps, self)

    def parameters(self) -> dict[str, Tensor]:
        if isinstance(self.params, FusionParams):
            out = {"fusion.weights": self.params.weights}
            if self.params.bias is not None:
                out["fusion.bias"] = self.params.bias
            return out
        if isinstance(self.params, ConvParams):
            out = {"fusion.conv.weight": self.params.weight}
            if self.params.bias is not None:
                out["fusion.conv.bias"] = self.params.bias
            return out
        return {}

    def describe(self) -> str:
        mode = self.params.mode if isinstance(self.params, FusionParams) else "-"
        bias = isinstance(self.params, FusionParams) and self.params.bias is not None
        return f"tag={self.tag} n={self.n} mode={mode} bias={int(bias)} past_only={int(self.past_only)}"


def fuse(maps: Sequence[Tensor], strategy: FusionStrategy) -> Tensor:
    _check_maps(maps, strategy.window)
    if strategy.tag == "none":
        return maps[0]
    if strategy.tag == "learned":
        return fuse_learned(maps, strategy.params)
    if strategy.tag == "concat_conv":
        return concat_conv(maps, strategy.params)
    return frame_reduce(maps, strategy.tag)


fuse_baseline = fuse


def make_fusion(tag: str, n: int, c: int, init_mode: Optional[str] = None, rng: Optional[Rng] = None,
                mode: str = "shared", bias: bool = False, past_only: bool = False) -> FusionStrategy:
    """Build a fusion strategy.

    Learned fusion defaults to identity init (one-hot on the target frame);
    concat_conv defaults to seeded random init.
    """
    if tag not in TAGS:
        raise ValueError(f"unknown fusion tag {tag!r}")
    if tag == "none" and n != 0:
        raise ValueError("fusion 'none' is only valid with n = 0")
    if init_mode is None:
        init_mode = "seeded_random" if tag == "concat_conv" else "identity"
    if init_mode not in INIT_MODES:
        raise ValueError(f"unknown init mode {init_mode!r}")
    if init_mode == "seeded_random" and rng is None:
        raise ValueError("seeded_random init needs an rng")
    k = 2 * n + 1
    target = 2 * n if past_only else n

    if tag == "learned":
        if init_mode == "identity":
            w = np.zeros(k)
            w[target] = 1.0
        elif init_mode == "uniform":
            w = np.full(k, 1.0 / k)
        else:
            w = rng.normal(k, std=1.0 / np.sqrt(k))
        if mode == "per_channel":
            w = np.tile(w, (c, 1))
        b = Tensor(np.zeros(c), requires_grad=True) if bias else None
        params = FusionParams(n=n, weights=Tensor(w, requires_grad=True), mode=mode, bias=b, past_only=past_only)
        return FusionStrategy("learned", n, params, past_only, init_mode)

    if tag == "concat_conv":
        w = np.zeros((c, k * c, 1, 1))
        if init_mode == "identity":
            w[np.arange(c), target * c + np.arange(c)] = 1.0
        elif init_mode == "uniform":
            for i in range(k):
                w[np.arange(c), i * c + np.arange(c)] = 1.0 / k
        else:
            w = rng.normal(w.shape, std=1.0 / np.sqrt(k * c))
        b = Tensor(np.zeros(c), requires_grad=True) if bias else None
        params = ConvParams(Tensor(w, requires_grad=True), b)
        return FusionStrategy("concat_conv", n, params, past_only, init_mode)

    return FusionStrategy(tag, n, None, past_only, init_mode)


# ----------------------------------------------------------------------------
# serialization: FFTN tensors plus a one-line plain-text header record

def save_fusion(directory: Union[str, Path], strategy: FusionStrategy, stem: str = "fusion") -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = [d / f"{stem}.txt"]
    written[0].write_text(strategy.describe() + "\n")
    for name, t in strategy.parameters().items():
        path = d / f"{stem}.{name.split('.', 1)[1]}.fftn"
        fftn.save(path, t.data.astype(np.float32))
        written.append(path)
    return written


def parse_header(line: str) -> dict[str, str]:
    fields = dict(item.split("=", 1) for item in line.split())
    for key in ("tag", "n", "mode", "bias", "past_only"):
        if key not in fields:
            raise ValueError(f"fusion header missing {key!r}: {line!r}")
    return fields


def load_fusion(directory: Union[str, Path], stem: str = "fusion") -> FusionStrategy:
    d = Path(directory)
    h = parse_header((d / f"{stem}.txt").read_text().strip())
    tag, n, past_only = h["tag"], int(h["n"]), h["past_only"] == "1"
    if tag == "learned":
        weights = Tensor(fftn.load(d / f"{stem}.weights.fftn"), requires_grad=True)
        bias = Tensor(fftn.load(d / f"{stem}.bias.fftn"), requires_grad=True) if h["bias"] == "1" else None
        return FusionStrategy(tag, n, FusionParams(n, weights, h["mode"], bias, past_only), past_only)
    if tag == "concat_conv":
        weight = Tensor(fftn.load(d / f"{stem}.conv.weight.fftn"), requires_grad=True)
        bias_path = d / f"{stem}.conv.bias.fftn"
        bias = Tensor(fftn.load(bias_path), requires_grad=True) if bias_path.exists() else None
        return FusionStrategy(tag, n, ConvParams(weight, bias), past_only)
    return FusionStrategy(tag, n, None, past_only)
