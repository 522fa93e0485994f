import numpy as np
import pytest
from hypothesis import given, strategies as st

from ffavod.frame_window import FeatureCache, assemble_window, get_or_compute, stats_csv, window_indices


def counting_backbone():
    calls = []

    def fn(i):
        calls.append(i)
        return np.full((2, 2), float(i))

    return fn, calls


@pytest.mark.parametrize("t,n,T,expected", [
    (1, 2, 6, (0, 0, 1, 2, 3)),  # t-2 missing: t-1 is duplicated
    (0, 2, 6, (0, 0, 0, 1, 2)),
    (5, 2, 6, (3, 4, 5, 5, 5)),
    (3, 0, 6, (3,)),
    (0, 1, 1, (0, 0, 0)),
])
def test_window_indices_examples(t, n, T, expected):
    assert window_indices(t, n, T).indices == expected


def test_past_only_window_ends_at_target():
    w = window_indices(3, 2, 10, past_only=True)
    assert w.indices == (0, 0, 1, 2, 3) and w.indices[w.target_position] == 3
    assert window_indices(6, 1, 10, past_only=True).indices == (4, 5, 6)


@given(T=st.integers(1, 30), n=st.integers(0, 4), data=st.data())
def test_window_invariants(T, n, data):
    t = data.draw(st.integers(0, T - 1))
    w = window_indices(t, n, T)
    assert len(w.indices) == 2 * n + 1
    assert w.indices[n] == t
    assert list(w.indices) == sorted(w.indices)
    assert all(w.indices[k] == min(max(t - n + k, 0), T - 1) for k in range(2 * n + 1))
    if t + 1 < T:
        nxt = window_indices(t + 1, n, T).indices
        assert all(a <= b for a, b in zip(w.indices, nxt))


@pytest.mark.parametrize("t,T", [(-1, 5), (5, 5)])
def test_window_rejects_out_of_range_target(t, T):
    with pytest.raises(IndexError):
        window_indices(t, 2, T)


def test_repeat_access_computes_once():
    fn, calls = counting_backbone()
    cache = FeatureCache(capacity=5)
    a = get_or_compute(cache, 4, fn)
    b = get_or_compute(cache, 4, fn)
    assert a is b and calls == [4]
    assert cache.stats.hits == 1 and cache.stats.computes == 1


@pytest.mark.parametrize("T,n", [(10, 2), (40, 2), (7, 3), (5, 0)])
def test_sequential_sweep_computes_each_frame_once(T, n):
    fn, calls = counting_backbone()
    cache = FeatureCache.for_window(n)
    for t in range(T):
        assemble_window(cache, t, n, T, fn)
    assert cache.stats.computes == T and sorted(calls) == list(range(T))
    assert len(cache) <= cache.capacity
    # a cache-free sweep recomputes every window slot
    assert sum(len(window_indices(t, n, T).indices) for t in range(T)) == T * (2 * n + 1)


def test_eviction_is_lowest_index_first():
    fn, _ = counting_backbone()
    cache = FeatureCache(capacity=5)
    for i in range(6):
        cache.get_or_compute(i, fn)
    assert 0 not in cache and set(cache.entries) == {1, 2, 3, 4, 5}
    cache.get_or_compute(0, fn)
    assert cache.stats.computes == 7
    assert cache.stats.evictions == 2


def test_duplicated_window_entries_alias_one_map():
    fn, calls = counting_backbone()
    maps = assemble_window(FeatureCache.for_window(1), 0, 1, 4, fn)
    assert maps[0] is maps[1] and maps[1] is not maps[2]
    assert calls == [0, 1]


def test_degenerate_window_is_singleton():
    fn, _ = counting_backbone()
    maps = assemble_window(FeatureCache.for_window(0), 2, 0, 4, fn)
    assert len(maps) == 1 and maps[0][0, 0] == 2.0


def test_cache_must_hold_a_window():
    fn, _ = counting_backbone()
    with pytest.raises(ValueError):
        assemble_window(FeatureCache(capacity=2), 2, 1, 5, fn)
    with pytest.raises(ValueError):
        FeatureCache(capacity=0)


def test_backbone_failure_propagates():
    def broken(i):
        raise RuntimeError("boom")

    cache = FeatureCache(capacity=3)
    with pytest.raises(RuntimeError):
        cache.get_or_compute(0, broken)
    assert cache.stats.computes == 0 and len(cache) == 0


def test_stats_csv():
    fn, _ = counting_backbone()
    cache = FeatureCache.for_window(1)
    for t in range(3):
        assemble_window(cache, t, 1, 3, fn)
    text = stats_csv([{"sequence_id": "s0", "frames": 3, **cache.stats.as_row()}])
    assert text == "sequence_id,frames,hits,computes,evictions\ns0,3,6,3,0\n"
