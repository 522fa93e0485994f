"""Forward/backward ops over :class:`Tensor`.

The convolution and the axis reductions are exposed twice: as array-level
kernels returning a single-use :class:`Context` (``conv2d_forward`` /
``conv2d_backward`` and friends), and as tensor-level wrappers that record
tape nodes.  Everything else only exists at tensor level.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContextError, NumericError, ShapeError, Tensor, check_finite


class Context:
    """Saved forward state.  ``take`` hands it out exactly once."""

    def __init__(self, op: str, **saved):
        self.op = op
        self._saved: Optional[dict] = saved

    @property
    def released(self) -> bool:
        return self._saved is None

    def take(self) -> dict:
        if self._saved is None:
            raise ContextError(f"{self.op}: context already consumed by backward")
        saved, self._saved = self._saved, None
        return saved


@dataclass
class ConvParams:
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got shape {self.weight.shape}")
        out_ch, _, kh, kw = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv kernel extents must be odd, got {kh}x{kw}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.bias is not None and self.bias.shape != (out_ch,):
            raise ShapeError(f"conv bias shape {self.bias.shape} != ({out_ch},)")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# ----------------------------------------------------------------------------
# convolution kernels

def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None,
                   stride: int = 1, padding: int = 0) -> tuple[np.ndarray, Context]:
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a rank-4 input, got shape {x.shape}")
    n, c, h, w = x.shape
    out_ch, in_ch, kh, kw = weight.shape
    if c != in_ch:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {in_ch}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit padded input {h}x{w}")

    if kh == 1 and kw == 1 and padding == 0:
        cols = x[:, :, ::stride, ::stride]
        out = np.tensordot(weight[:, :, 0, 0], cols, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # materialize once; backward reuses the patch matrix for grad_weight
        cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
        out = (cols @ weight.reshape(out_ch, -1).T).reshape(n, ho, wo, out_ch).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)
    check_finite(out, "conv2d")
    ctx = Context("conv2d", cols=cols, weight=weight, x_shape=x.shape, stride=stride,
                  padding=padding, has_bias=bias is not None)
    return out, ctx


def conv2d_backward(ctx: Context, grad_out: np.ndarray,
                    needs: Sequence[bool] = (True, True, True)) -> tuple[Optional[np.ndarray], ...]:
    """Gradients w.r.t. (input, weight, bias) of ``sum(grad_out * out)``."""
    s = ctx.take()
    cols, weight = s["cols"], s["weight"]
    n, c, h, w = s["x_shape"]
    stride, padding = s["stride"], s["padding"]
    out_ch, _, kh, kw = weight.shape
    _, _, ho, wo = grad_out.shape
    need_x, need_w, need_b = (list(needs) + [True] * 3)[:3]

    gx = gw = gb = None
    if kh == 1 and kw == 1 and padding == 0:
        if need_w:
            gw = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3])).reshape(out_ch, c, 1, 1)
        if need_x:
            gsub = np.tensordot(weight[:, :, 0, 0], grad_out, axes=([0], [1])).transpose(1, 0, 2, 3)
            gx = np.zeros((n, c, h, w), dtype=grad_out.dtype)
            gx[:, :, ::stride, ::stride][:, :, :ho, :wo] = gsub
    else:
        g2 = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, out_ch)
        if need_w:
            gw = (g2.T @ cols).reshape(out_ch, c, kh, kw)
        if need_x:
            dcols = (g2 @ weight.reshape(out_ch, -1)).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
    if need_b and s["has_bias"]:
        gb = grad_out.sum(axis=(0, 2, 3))
    return gx, gw, gb


# ----------------------------------------------------------------------------
# reduction kernels

REDUCTIONS = ("sum", "mean", "max", "median")


def reduce_forward(x: np.ndarray, axis: Optional[int], how: str) -> tuple[np.ndarray, Context]:
    """Reduce ``x`` over ``axis`` (``None`` only for ``sum``).

    Median of an even count is the lower-middle order statistic.  Max and
    median remember the first index attaining the selected value so backward
    routes the whole gradient there.
    """
    if how not in REDUCTIONS:
        raise ValueError(f"unknown reduction {how!r}")
    if axis is None:
        if how != "sum":
            raise ValueError(f"{how} needs an explicit axis")
        out = np.asarray(x.sum(dtype=x.dtype))
        return out, Context("sum", shape=x.shape, axis=None, how=how)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    axis %= x.ndim
    m = x.shape[axis]
    if m == 0:
        raise ShapeError(f"cannot reduce over empty axis {axis}")
    index = None
    if how == "sum":
        out = x.sum(axis=axis)
    elif how == "mean":
        out = x.mean(axis=axis)
    elif how == "max":
        index = np.argmax(x, axis=axis)
        out = np.take_along_axis(x, np.expand_dims(index, axis), axis).squeeze(axis)
    else:
        k = (m - 1) // 2
        out = np.take(np.partition(x, k, axis=axis), k, axis=axis)
        index = np.argmax(x == np.expand_dims(out, axis), axis=axis)
    out = np.asarray(out, dtype=x.dtype, order="C")
    check_finite(out, how)
    return out, Context(how, shape=x.shape, axis=axis, how=how, index=index)


def reduce_backward(ctx: Context, grad_out: np.ndarray) -> np.ndarray:
    s = ctx.take()
    shape, axis, how = s["shape"], s["axis"], s["how"]
    if axis is None:
        return np.full(shape, grad_out, dtype=grad_out.dtype)
    g = np.expand_dims(grad_out, axis)
    if how == "sum":
        return np.ascontiguousarray(np.broadcast_to(g, shape))
    if how == "mean":
        return np.ascontiguousarray(np.broadcast_to(g / shape[axis], shape))
    gx = np.zeros(shape, dtype=grad_out.dtype)
    np.put_along_axis(gx, np.expand_dims(s["index"], axis), g, axis)
    return gx


# ----------------------------------------------------------------------------
# tensor-level ops

def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    bias = None if p.bias is None else p.bias.data
    out, ctx = conv2d_forward(x.data, p.weight.data, bias, p.stride, p.padding)
    parents = [x] + p.tensors()

    def backward(g):
        needs = [t.requires_grad for t in parents] + [False]
        return conv2d_backward(ctx, g, needs[:3])[:len(parents)]

    return Tensor.from_op(out, parents, backward, "conv2d")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return Tensor.from_op(a.data + b.data, [a, b],
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; numpy broadcasting (e.g. 1-channel saliency over c channels)."""
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(ad * bd, [a, b], backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.data.dtype.type(factor)
    return Tensor.from_op(x.data * f, [x], lambda g: (g * f,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.data.dtype), [x],
                          lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)
    # keep strictly inside (0, 1) at this precision
    hi = np.nextafter(z.dtype.type(1), z.dtype.type(0))
    return np.clip(s, np.finfo(z.dtype).tiny, hi)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor.from_op(s, [x], lambda g: (g * s * (1 - s),), "sigmoid")


def _reduce(x: Tensor, axis: Optional[int], how: str) -> Tensor:
    out, ctx = reduce_forward(x.data, axis, how)
    return Tensor.from_op(out, [x], lambda g: (reduce_backward(ctx, g),), how)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _reduce(x, None, "sum")


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    return _reduce(x, axis, "mean")


def max_over_axis(x: Tensor, axis: int) -> Tensor:
    return _reduce(x, axis, "max")


def median_over_axis(x: Tensor, axis: int) -> Tensor:
    return _reduce(x, axis, "median")


def upsample2x_nearest(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError("upsample needs at least two spatial axes")
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    h, w = x.shape[-2:]

    def backward(g):
        return (g.reshape(g.shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return Tensor.from_op(out, [x], backward, "upsample2x")


def maxpool2x(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pool; ties route gradient to the first cell in row-major order."""
    if x.ndim < 2:
        raise ShapeError("maxpool needs at least two spatial axes")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x needs even spatial extents, got {h}x{w}")
    lead = x.shape[:-2]
    win = x.data.reshape(lead + (h // 2, 2, w // 2, 2))
    win = np.moveaxis(win, -3, -2).reshape(lead + (h // 2, w // 2, 4))
    index = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, index[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(lead + (h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, index[..., None], g[..., None], axis=-1)
        gw = np.moveaxis(gw.reshape(lead + (h // 2, w // 2, 2, 2)), -2, -3)
        return (gw.reshape(x.shape),)

    return Tensor.from_op(out, [x], backward, "maxpool2x")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (third from the end)."""
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    if len(ref) < 3:
        raise ShapeError(f"concat_channels needs rank >= 3, got {ref}")
    for t in xs[1:]:
        if t.ndim != len(ref) or t.shape[:-3] != ref[:-3] or t.shape[-2:] != ref[-2:]:
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {ref}")
    splits = np.cumsum([t.shape[-3] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=-3)
    return Tensor.from_op(out, list(xs), lambda g: tuple(np.split(g, splits, axis=-3)), "concat")


__all__ = [
    "Context", "ConvParams", "ContextError", "NumericError", "ShapeError", "REDUCTIONS",
    "conv_output_size", "conv2d_forward", "conv2d_backward", "reduce_forward", "reduce_backward",
    "conv2d", "add", "mul", "scale", "relu", "sigmoid", "sum", "mean_over_axis", "max_over_axis",
    "median_over_axis", "upsample2x_nearest", "maxpool2x", "concat_channels",
]
