"""Dense tensor with a small reverse-mode tape.

A :class:`Tensor` wraps a contiguous numpy array (float32 unless the
:func:`precision` context says otherwise).  Ops record their parents and a
backward closure; :meth:`Tensor.backward` walks the recorded graph in reverse
topological order and accumulates gradients into leaf tensors that have
``requires_grad`` set.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

MAX_RANK = 4

_DTYPE = [np.float32]
_GRAD = [True]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ContextError(RuntimeError):
    """Raised when a saved forward context is reused after backward."""


def default_dtype() -> type:
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are cast to.

    Production code runs in float32; gradient oracles switch to float64 so
    central differences are not swamped by rounding.
    """
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Ops inside this block record no graph edges."""
    _GRAD.append(False)
    try:
        yield
    finally:
        _GRAD.pop()


def grad_enabled() -> bool:
    return _GRAD[-1]


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite value in output of shape {arr.shape}")
    return arr


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Rank 0-4 array with an optional gradient slot.

    Activations follow the batch x channels x height x width convention.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=default_dtype(), order="C")
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        """Wrap an op result, recording the graph edge only when a parent needs grad."""
        check_finite(data, op)
        out = cls.__new__(cls)
        out.data = np.asarray(data, order="C")
        if out.data.ndim > MAX_RANK:
            raise ShapeError(f"{op}: output rank {out.data.ndim} exceeds {MAX_RANK}")
        out.grad = None
        out.name = ""
        out._op = op
        out.requires_grad = _GRAD[-1] and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``grad`` defaults to ones, i.e. the gradient of ``sum(self)``.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.data)
        elif grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            # the graph below this node is single-use
            node._backward = _consumed
            node._parents = ()


def _consumed(grad):
    raise ContextError("graph already consumed by an earlier backward()")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Rng:
    """Seeded generator; PCG64 streams are reproducible across platforms."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, low: float, high: float, shape=None):
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from (seed, key)."""
        seq = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(seq.generate_state(1, dtype=np.uint64)[0]))
