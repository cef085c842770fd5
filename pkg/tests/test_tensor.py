import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from goalgaze import tensor as T
from goalgaze.errors import ConfigurationError, DimensionError, GraphStateError, NonFiniteError
from goalgaze.tensor import Tensor

from oracles import central_diff, conv2d_direct, maxpool_scan, rel_err, xent_rows


@pytest.mark.parametrize("shape,F,k,stride,pad", [
    ((2, 3, 6, 6), 4, 3, 1, 1),
    ((1, 2, 7, 7), 3, 3, 2, 0),
    ((2, 1, 5, 5), 2, 1, 1, 0),
    ((1, 3, 8, 8), 2, 3, 1, 0),
    ((1, 2, 6, 6), 3, 2, 2, 0),
])
def test_conv_matches_direct_summation(shape, F, k, stride, pad):
    rng = np.random.default_rng(0)
    x = rng.normal(size=shape)
    w = rng.normal(size=(F, shape[1], k, k))
    b = rng.normal(size=F)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(out, conv2d_direct(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_rejects_non_integer_output():
    x = Tensor(np.zeros((1, 1, 6, 6)))
    with pytest.raises(ConfigurationError):
        T.conv2d(x, Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)), stride=2, padding=0)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))


def test_maxpool_matches_scan_and_routes_ties_to_first():
    rng = np.random.default_rng(1)
    x = rng.integers(0, 3, size=(2, 2, 6, 6)).astype(np.float64)  # many ties
    xt = Tensor(x, requires_grad=True)
    y = T.maxpool2d(xt, 2, 2)
    ref, where = maxpool_scan(x)
    np.testing.assert_array_equal(y.data, ref)
    y.sum().backward()
    expect = np.zeros_like(x)
    for n, c, i, j in np.ndindex(ref.shape):
        r, s = where[n, c, i, j]
        expect[n, c, r, s] += 1
    np.testing.assert_array_equal(xt.grad, expect)


def test_maxpool_odd_extent_rejected():
    with pytest.raises(ConfigurationError):
        T.maxpool2d(Tensor(np.zeros((1, 1, 5, 5))), 2, 2)


def test_softmax_xent_matches_log_sum_exp():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(5, 4)) * 10
    labels = np.array([0, 3, 1, 2, 3])
    np.testing.assert_allclose(T.softmax_xent(Tensor(logits), labels).data, xent_rows(logits, labels), rtol=1e-12)


def test_softmax_xent_label_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_xent(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.nan]))
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.inf]))


def test_backward_twice_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 2.0).sum()
    y.backward()
    with pytest.raises(GraphStateError):
        y.backward()


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        (x * 2.0).backward()


def test_shared_subexpression_accumulates():
    # sq feeds both operands of one product, so its gradient arrives twice
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    sq = x * x
    (sq * sq).sum().backward()
    np.testing.assert_allclose(x.grad, 4 * x.data ** 3)


def test_leaf_used_twice_accumulates():
    x = Tensor(np.array([0.5, 2.0]), requires_grad=True)
    ((x * 3.0) * x).sum().backward()
    np.testing.assert_allclose(x.grad, 6 * x.data)


def test_no_graph_without_requires_grad():
    y = T.relu(Tensor(np.ones(2)))
    assert y.is_leaf and not y.requires_grad
    with pytest.raises(GraphStateError):
        y.sum().backward()


def test_gradients_on_a_small_network_match_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3)) * 0.5
    b = rng.normal(size=3)
    s = rng.uniform(0.2, 2.0, size=3)
    W2 = rng.normal(size=(12, 4)) * 0.5
    b2 = rng.normal(size=4)
    labels = np.array([1, 3])
    arrays = [x, w, b, s, W2, b2]

    def build(track):
        ts = [Tensor(a, requires_grad=track) for a in arrays]
        h = T.relu(T.conv2d(ts[0], ts[1], ts[2], 1, 1))
        h = T.channel_scale(T.maxpool2d(h), ts[3])
        logits = T.dense(T.flatten(h), ts[4], ts[5])
        return T.softmax_xent(logits, labels).mean(), ts

    loss, ts = build(True)
    loss.backward()
    for a, t in zip(arrays, ts):
        num = central_diff(lambda: build(False)[0].item(), a)
        assert rel_err(t.grad, num) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(0, 1), st.integers(0, 10_000))
def test_conv_is_affine_in_input(c, f, hw, pad, seed):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.normal(size=(2, 1, c, hw, hw))
    w = rng.normal(size=(f, c, 3, 3)) if hw + 2 * pad >= 3 else None
    if w is None:
        return
    b = rng.normal(size=f)
    conv = lambda x, bb: T.conv2d(Tensor(x), Tensor(w), Tensor(bb), 1, pad).data
    np.testing.assert_allclose(conv(x1 + x2, b), conv(x1, b) + conv(x2, np.zeros(f)), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.integers(0, 10_000))
def test_maxpool_commutes_with_shift(shift, seed):
    x = np.random.default_rng(seed).normal(size=(1, 2, 4, 4))
    a = T.maxpool2d(Tensor(x + shift)).data
    b = T.maxpool2d(Tensor(x)).data + shift
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_float32_stays_float32():
    x = Tensor(np.ones((1, 1, 4, 4), np.float32))
    w = Tensor(np.ones((1, 1, 3, 3), np.float32))
    out = T.conv2d(x, w, Tensor(np.zeros(1, np.float32)), 1, 1)
    assert out.dtype == np.float32
