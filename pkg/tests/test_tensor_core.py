import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ffavod import tensor_core as tc
from ffavod.tensor_core import ConvParams, Tensor, fftn

from gradcheck import check_gradients
from oracles import REL_TOL, naive_conv2d

SEEDS = range(20)


def away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(gap, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def distinct(rng, shape, spacing=0.01):
    """Values whose pairwise gaps exceed finite-difference reach, so argmax/median never flip."""
    n = int(np.prod(shape))
    vals = rng.permutation(n) * spacing + rng.uniform(0, spacing / 4)
    return (vals - vals.mean()).reshape(shape)


# --- forward convolution ----------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), o=st.integers(1, 3), h=st.integers(3, 7), w=st.integers(3, 7),
       k=st.sampled_from([1, 3]), stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 2**31))
def test_conv_matches_nested_loops(n, c, o, h, w, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x, wt, b = rng.standard_normal((n, c, h, w)), rng.standard_normal((o, c, k, k)), rng.standard_normal(o)
    with tc.precision(np.float64):
        out, _ = tc.conv2d_forward(x, wt, b, stride, pad)
    np.testing.assert_allclose(out, naive_conv2d(x, wt, b, stride, pad), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("size,k,s,p,expected", [(8, 3, 1, 1, 8), (8, 3, 2, 1, 4), (7, 3, 2, 1, 4), (5, 1, 1, 0, 5),
                                                 (64, 3, 2, 1, 32)])
def test_conv_output_size(size, k, s, p, expected):
    assert tc.conv_output_size(size, k, s, p) == expected


def test_conv_rejects_bad_parameters():
    with pytest.raises(tc.ShapeError):
        ConvParams(Tensor(np.ones((2, 2, 2, 2))))
    with pytest.raises(ValueError):
        ConvParams(Tensor(np.ones((2, 2, 3, 3))), stride=0)
    with pytest.raises(tc.ShapeError):
        ConvParams(Tensor(np.ones((2, 2, 3, 3))), bias=Tensor(np.ones(3)))
    with pytest.raises(tc.ShapeError):
        tc.conv2d_forward(np.ones((1, 3, 5, 5), np.float32), np.ones((2, 2, 3, 3), np.float32))


# --- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    c, o = rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.standard_normal((2, c, 5, 6))
    w = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal(o)
    fn = lambda t: tc.conv2d(t[0], ConvParams(t[1], t[2], stride, pad))
    assert check_gradients(fn, [x, w, b], seed) < REL_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 3, 4, 4))
    b = rng.standard_normal((1, 3, 1, 4))  # broadcast over batch and rows
    assert check_gradients(lambda t: tc.add(t[0], t[1]), [a, b], seed) < REL_TOL
    assert check_gradients(lambda t: tc.mul(t[0], t[1]), [a, b], seed) < REL_TOL
    assert check_gradients(lambda t: tc.scale(t[0], -1.7), [a], seed) < REL_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_activation_gradients(seed):
    rng = np.random.default_rng(seed)
    x = away_from_zero(rng, (2, 3, 4, 4))
    assert check_gradients(lambda t: tc.relu(t[0]), [x], seed) < REL_TOL
    assert check_gradients(lambda t: tc.sigmoid(t[0]), [3 * x], seed) < REL_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_reduction_gradients(seed):
    rng = np.random.default_rng(seed)
    x = distinct(rng, (2, 5, 3, 4))
    axis = int(rng.integers(0, 4))
    assert check_gradients(lambda t: tc.sum(t[0]), [x], seed) < REL_TOL
    for op in (tc.mean_over_axis, tc.max_over_axis, tc.median_over_axis):
        assert check_gradients(lambda t: op(t[0], axis), [x], seed) < REL_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_resampling_and_concat_gradients(seed):
    rng = np.random.default_rng(seed)
    x = distinct(rng, (2, 2, 4, 6))
    y = rng.standard_normal((2, 3, 4, 6))
    assert check_gradients(lambda t: tc.upsample2x_nearest(t[0]), [x], seed) < REL_TOL
    assert check_gradients(lambda t: tc.maxpool2x(t[0]), [x], seed) < REL_TOL
    assert check_gradients(lambda t: tc.concat_channels([t[0], t[1]]), [x, y], seed) < REL_TOL


def test_gradient_accumulates_over_shared_inputs():
    with tc.precision(np.float64):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        tc.sum(tc.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


# --- semantics ------------------------------------------------------------------

def test_median_takes_lower_middle_for_even_counts():
    out, _ = tc.reduce_forward(np.array([[4.0, 1.0, 3.0, 2.0]], np.float32), 1, "median")
    assert out[0] == 2.0


def test_max_and_maxpool_route_ties_to_first_index():
    x = Tensor(np.array([[1.0, 5.0, 5.0]]), requires_grad=True)
    tc.sum(tc.max_over_axis(x, 1)).backward()
    np.testing.assert_array_equal(x.grad, [[0, 1, 0]])
    p = Tensor(np.full((1, 2, 2), 7.0), requires_grad=True)
    tc.sum(tc.maxpool2x(p)).backward()
    np.testing.assert_array_equal(p.grad, [[[1, 0], [0, 0]]])


def test_maxpool_rejects_odd_extent():
    with pytest.raises(tc.ShapeError):
        tc.maxpool2x(Tensor(np.ones((1, 3, 4))))


def test_add_rejects_incompatible_shapes():
    with pytest.raises(tc.ShapeError):
        tc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


def test_tensor_validation():
    assert Tensor([1.0, 2.0]).data.dtype == np.float32
    with pytest.raises(tc.ShapeError):
        Tensor(np.ones((1, 1, 1, 1, 1)))
    with pytest.raises(tc.ShapeError):
        Tensor(np.ones((0, 3)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_result_raises():
    with pytest.raises(tc.NumericError):
        tc.scale(Tensor([3e38]), 10.0)


def test_context_is_single_use():
    x = np.ones((1, 1, 3, 3), np.float32)
    _, ctx = tc.conv2d_forward(x, np.ones((1, 1, 3, 3), np.float32), padding=1)
    tc.conv2d_backward(ctx, np.ones((1, 1, 3, 3), np.float32))
    assert ctx.released
    with pytest.raises(tc.ContextError):
        tc.conv2d_backward(ctx, np.ones((1, 1, 3, 3), np.float32))
    _, rctx = tc.reduce_forward(x, 2, "max")
    tc.reduce_backward(rctx, np.ones((1, 1, 3), np.float32))
    with pytest.raises(tc.ContextError):
        tc.reduce_backward(rctx, np.ones((1, 1, 3), np.float32))


def test_second_backward_over_same_graph_raises():
    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    loss = tc.sum(tc.conv2d(x, ConvParams(Tensor(np.ones((1, 1, 3, 3))), padding=1)))
    loss.backward()
    with pytest.raises(tc.ContextError):
        loss.backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with tc.no_grad():
        y = tc.scale(x, 2.0)
    assert not y.requires_grad and y._parents == ()
    assert tc.grad_enabled()


def test_precision_context_restores_default():
    with tc.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert tc.default_dtype() == np.float32


# --- determinism and the tensor file format ---------------------------------------

def test_rng_is_reproducible_and_streams_are_independent():
    a, b = tc.Rng(7), tc.Rng(7)
    np.testing.assert_array_equal(a.normal((5,)), b.normal((5,)))
    np.testing.assert_array_equal(tc.Rng(7).spawn(1).normal((4,)), tc.Rng(7).spawn(1).normal((4,)))
    assert not np.array_equal(tc.Rng(7).spawn(1).normal((4,)), tc.Rng(7).spawn(2).normal((4,)))


@settings(max_examples=50, deadline=None)
@given(shape=st.lists(st.integers(1, 5), min_size=0, max_size=4), seed=st.integers(0, 2**31))
def test_fftn_round_trip_is_bit_exact(shape, seed):
    arr = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    arr.reshape(-1)[:1] = np.array([-0.0, np.nan, np.inf][seed % 3], np.float32)
    back = fftn.decode(fftn.encode(arr))
    assert back.shape == arr.shape and back.dtype == np.float32
    assert back.tobytes() == arr.tobytes()


def test_fftn_header_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = fftn.encode(arr)
    assert buf[:4] == b"FFTN" and buf[4:7] == bytes([1, 0, 2])
    assert buf[7:15] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert buf[15:] == arr.astype("<f4").tobytes()
    fftn.save(tmp_path / "a.fftn", Tensor(arr))
    assert fftn.load(tmp_path / "a.fftn").tobytes() == arr.tobytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + bytes([2]) + b[5:],
    lambda b: b[:5] + bytes([1]) + b[6:],
    lambda b: b[:-1],
    lambda b: b[:6],
])
def test_fftn_rejects_malformed_input(mutate):
    buf = fftn.encode(np.ones((2, 2), np.float32))
    with pytest.raises(fftn.FormatError):
        fftn.decode(mutate(buf))


def test_fftn_rejects_non_float32():
    with pytest.raises(fftn.FormatError):
        fftn.encode(np.ones(3))
