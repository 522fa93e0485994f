"""Sliding frame windows and the compute-once feature cache."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Generic, TypeVar

T = TypeVar("T")


@dataclass(frozen=True)
class WindowIndex:
    t: int
    n: int
    indices: tuple[int, ...]
    past_only: bool = False

    @property
    def target_position(self) -> int:
        return 2 * self.n if self.past_only else self.n


def window_indices(t: int, n: int, T: int, past_only: bool = False) -> WindowIndex:
    """Frame indices for the window around target ``t`` in a ``T``-frame sequence.

    Out-of-range neighbours are clamped to the first/last frame, which
    duplicates boundary frames.  ``past_only`` uses ``t-2n .. t`` instead of
    ``t-n .. t+n``.
    """
    if T < 1:
        raise ValueError(f"sequence length must be >= 1, got {T}")
    if not 0 <= t < T:
        raise IndexError(f"frame {t} out of range for sequence of length {T}")
    if n < 0:
        raise ValueError(f"half-window n must be >= 0, got {n}")
    start = t - 2 * n if past_only else t - n
    idx = tuple(min(max(start + k, 0), T - 1) for k in range(2 * n + 1))
    return WindowIndex(t, n, idx, past_only)


@dataclass
class CacheStats:
    hits: int = 0
    computes: int = 0
    evictions: int = 0

    FIELDS = ("hits", "computes", "evictions")

    def as_row(self) -> dict[str, int]:
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass
class FeatureCache(Generic[T]):
    """Frame-index keyed store of backbone outputs for one video stream.

    When full, the lowest frame index is evicted first, which is optimal for
    a forward sequential sweep.  ``computes`` counts backbone invocations.
    """

    capacity: int
    entries: dict[int, T] = field(default_factory=dict)
    stats: CacheStats = field(default_factory=CacheStats)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError(f"cache capacity must be >= 1, got {self.capacity}")

    @classmethod
    def for_window(cls, n: int, extra: int = 0) -> "FeatureCache":
        return cls(capacity=2 * n + 1 + extra)

    def __contains__(self, index: int) -> bool:
        return index in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get_or_compute(self, index: int, backbone_fn: Callable[[int], T]) -> T:
        if index in self.entries:
            self.stats.hits += 1
            return self.entries[index]
        value = backbone_fn(index)
        self.stats.computes += 1
        while len(self.entries) >= self.capacity:
            del self.entries[min(self.entries)]
            self.stats.evictions += 1
        self.entries[index] = value
        return value

    def clear(self) -> None:
        self.entries.clear()


def get_or_compute(cache: FeatureCache, frame_index: int, backbone_fn: Callable[[int], T]) -> T:
    return cache.get_or_compute(frame_index, backbone_fn)


def assemble_window(cache: FeatureCache, t: int, n: int, T: int, backbone_fn: Callable[[int], T],
                    past_only: bool = False) -> list[T]:
    """Feature maps for the window around ``t``, ordered by window position.

    Duplicated boundary indices return the same cached object.
    """
    win = window_indices(t, n, T, past_only)
    if cache.capacity < len(set(win.indices)):
        raise ValueError(f"cache capacity {cache.capacity} cannot hold a window of {2 * n + 1} frames")
    return [cache.get_or_compute(i, backbone_fn) for i in win.indices]


def stats_csv(rows: list[dict], columns: tuple[str, ...] = ("sequence_id", "frames") + CacheStats.FIELDS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in columns})
    return buf.getvalue()
