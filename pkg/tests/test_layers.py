import numpy as np
import pytest

from goalgaze import tensor as T
from goalgaze.errors import ConfigurationError, ConstraintError, DimensionError
from goalgaze.layers import (
    AttentionWeights,
    MiniVGGConfig,
    attention_apply,
    build_minivgg,
    load_network,
    project_nonneg,
    save_network,
    topk,
)
from goalgaze.tensor import Tensor

from oracles import central_diff, conv2d_direct, rel_err


@pytest.fixture(scope="module")
def net():
    n = build_minivgg(10, seed=3)
    n.input_mean = np.array([0.4, 0.5, 0.6], np.float32)
    n.input_std = np.array([0.2, 0.25, 0.3], np.float32)
    return n.freeze()


def naive_forward(net, x, attn=None):
    """Layer-by-layer loop reference in float64."""
    p = {k: v.data.astype(np.float64) for k, v in net.params.items()}
    h = (x - net.input_mean[None, :, None, None]) / net.input_std[None, :, None, None]
    h = h.astype(np.float64)
    for b in range(1, 5):
        for i in (1, 2):
            h = np.maximum(conv2d_direct(h, p[f"block{b}.conv{i}.weight"], p[f"block{b}.conv{i}.bias"], 1, 1), 0)
        B, C, H, W = h.shape
        h = h.reshape(B, C, H // 2, 2, W // 2, 2).max(axis=(3, 5))
        if b == 3 and attn is not None:
            h = h * attn[None, :, None, None]
    h = np.maximum(h.reshape(h.shape[0], -1) @ p["fc1.weight"] + p["fc1.bias"], 0)
    return h @ p["fc2.weight"] + p["fc2.bias"]


def test_forward_matches_loop_reference(net):
    x = np.random.default_rng(0).random((2, 3, 32, 32))
    w = np.random.default_rng(1).uniform(0, 2, 128)
    net64 = net.astype(np.float64)
    net64.attention = AttentionWeights(w)
    np.testing.assert_allclose(net64.forward(x).data, naive_forward(net, x, w), rtol=1e-9, atol=1e-9)


def test_all_ones_attention_is_bit_identical(net):
    x = np.random.default_rng(2).random((8, 3, 32, 32)).astype(np.float32)
    plain = net.forward(x).data
    net2 = net.copy()
    net2.attention = AttentionWeights.fresh(net.config.attention_filters)
    assert np.array_equal(net2.forward(x).data, plain)


def test_attention_length_and_sign_checked():
    act = Tensor(np.ones((1, 4, 2, 2)))
    with pytest.raises(DimensionError):
        attention_apply(act, AttentionWeights(np.ones(3)))
    with pytest.raises(ConstraintError):
        attention_apply(act, AttentionWeights(np.array([1.0, -0.1, 1.0, 1.0])))


def test_attention_scales_each_filter():
    act = np.random.default_rng(0).normal(size=(2, 3, 2, 2))
    w = np.array([0.0, 1.5, 2.0])
    out = attention_apply(Tensor(act), AttentionWeights(w)).data
    for f in range(3):
        np.testing.assert_array_equal(out[:, f], act[:, f] * w[f])


def test_projection_clamps_only_negatives():
    a = AttentionWeights(np.array([-1.0, 0.0, 2.5, -1e-9]), (2,), 0.5)
    p = project_nonneg(a)
    np.testing.assert_array_equal(p.w, [0, 0, 2.5, 0])
    assert p.target == (2,) and p.alpha == 0.5


def test_topk_order_and_ties():
    logits = np.array([[1.0, 3.0, 3.0, 0.5], [2.0, 2.0, 2.0, 2.0]])
    np.testing.assert_array_equal(topk(logits, 2), [[1, 2], [0, 1]])
    with pytest.raises(ConfigurationError):
        topk(logits, 5)


def test_attention_gradient_through_network(net):
    rng = np.random.default_rng(4)
    x = rng.random((2, 3, 32, 32))
    net64 = net.astype(np.float64)
    feat = net64.prefix(x)
    w = rng.uniform(0.5, 1.5, 128)
    labels = np.array([3, 7])

    def loss(track):
        wt = Tensor(w, requires_grad=track)
        return T.softmax_xent(net64.suffix(Tensor(feat.data), wt), labels).mean(), wt

    out, wt = loss(True)
    out.backward()
    idx = rng.choice(128, 12, replace=False)
    sub = w[idx].copy()

    def f():
        w[idx] = sub
        return loss(False)[0].item()
    num = central_diff(f, sub)
    assert rel_err(wt.grad[idx], num) < 1e-5


def test_frozen_base_gets_no_gradients(net):
    x = np.random.default_rng(5).random((2, 3, 32, 32)).astype(np.float32)
    w = Tensor(np.ones(128, np.float32), requires_grad=True)
    T.softmax_xent(net.suffix(net.prefix(x), w), np.array([0, 1])).mean().backward()
    assert w.grad is not None
    assert all(p.grad is None for p in net.params.values())


def test_checkpoint_round_trip(tmp_path, net):
    net2 = net.copy()
    net2.attention = AttentionWeights(np.linspace(0, 2, 128, dtype=np.float32), (4,), 0.9)
    save_network(net2, tmp_path / "a")
    back = load_network(tmp_path / "a")
    x = np.random.default_rng(6).random((3, 3, 32, 32)).astype(np.float32)
    assert np.array_equal(back.forward(x).data, net2.forward(x).data)
    assert back.attention.target == (4,) and back.trainable() == []
    save_network(back, tmp_path / "b")
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_head_size_and_bad_inputs(net):
    assert net.param_count(net.final_layer) == 256 * 10 + 10
    with pytest.raises(DimensionError):
        net.forward(np.zeros((1, 3, 16, 16)))
    with pytest.raises(ConfigurationError):
        MiniVGGConfig(attention_slot=5)
    with pytest.raises(ConfigurationError):
        MiniVGGConfig(image_size=24)
