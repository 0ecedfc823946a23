import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from armfusion import nn
from armfusion.nn import ConfigError, Network, OptimizerState, ShapeError, StaleCacheError

from gradcheck import MAX_SKIPPED, TOL, max_relative_error, numeric_grads, relu_pattern, skipped_fraction


def test_conv_zero_input_gives_zero_output():
    k = np.random.default_rng(0).standard_normal((2, 1, 2, 2))
    out = nn.conv2d_forward(np.zeros((1, 3, 3)), k, np.zeros(2))
    assert out.shape == (2, 2, 2)
    assert np.all(out == 0)


def test_conv_identity_kernel_is_exact_identity():
    x = np.random.default_rng(1).standard_normal((1, 5, 7)).astype(np.float32)
    out = nn.conv2d_forward(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    assert np.array_equal(out, x)


def test_conv_hand_computed_windows():
    x = np.arange(1, 10, dtype=np.float64).reshape(1, 3, 3)
    k = np.array([[[[1, 0], [0, 1]]]], dtype=np.float64)
    out = nn.conv2d_forward(x, k, np.zeros(1))
    assert np.array_equal(out, [[[6, 8], [12, 14]]])


def _naive_conv(x, k, b, stride, pad):
    c_out, c_in, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (xp.shape[1] - kh) // stride + 1
    wo = (xp.shape[2] - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                win = xp[:, i * stride : i * stride + kh, j * stride : j * stride + kw]
                out[o, i, j] = np.sum(win * k[o]) + b[o]
    return out


@pytest.mark.parametrize("stride,pad,size,kernel", [(1, 0, 5, 3), (2, 1, 6, 4), (1, 1, 4, 3), (3, 0, 7, 1)])
def test_conv_matches_naive_loops(stride, pad, size, kernel):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, size, size))
    k = rng.standard_normal((3, 2, kernel, kernel))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(nn.conv2d_forward(x, k, b, stride, pad), _naive_conv(x, k, b, stride, pad),
                               rtol=1e-12, atol=1e-12)


def test_conv_errors():
    with pytest.raises(ShapeError):
        nn.conv2d_forward(np.zeros((2, 4, 4)), np.zeros((1, 1, 2, 2)), np.zeros(1))
    with pytest.raises(ConfigError):
        nn.conv2d_forward(np.zeros((1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros(1), stride=2)
    with pytest.raises(ConfigError):
        nn.conv2d_forward(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))


def test_empty_network_is_identity():
    net = Network([], (3,))
    x = np.array([[1.0, -2.0, 3.0]])
    out, _ = nn.forward(net, x)
    assert np.array_equal(out, x)


def test_relu_forward():
    net = Network([nn.relu()], (3,))
    out, _ = nn.forward(net, np.array([[-1.0, 2.0, 0.0]]))
    assert np.array_equal(out, [[0, 2, 0]])


def test_dense_hand_arithmetic():
    net = Network([nn.dense(1)], (2,))
    net.set_parameters([np.array([[1.0, 1.0]]), np.array([1.0])])
    out, _ = nn.forward(net, np.array([[2.0, 3.0]]))
    assert out.tolist() == [[6.0]]


def test_shape_inconsistency_names_layer():
    with pytest.raises(ShapeError, match="layer 1"):
        Network([nn.flatten(), nn.conv(2, 3)], (1, 4, 4))
    net = Network([nn.dense(2)], (3,))
    with pytest.raises(ShapeError, match="layer 0"):
        nn.forward(net, np.zeros((1, 4)))


def test_zero_upstream_gradient_gives_zero_param_grads():
    net = Network([nn.conv(2, 3, 1, 1), nn.relu(), nn.flatten(), nn.dense(3)], (1, 4, 4), seed=3)
    x = np.random.default_rng(0).standard_normal((2, 1, 4, 4)).astype(np.float32)
    out, cache = nn.forward(net, x)
    grads, dx = nn.backward(net, cache, np.zeros_like(out))
    assert all(np.all(g == 0) for g in grads)
    assert np.all(dx == 0)


def test_dense_chain_rule_by_hand():
    net = Network([nn.dense(1)], (1,))
    net.set_parameters([np.array([[3.0]]), np.array([0.0])])
    out, cache = nn.forward(net, np.array([[2.0]]))
    _, g = nn.mse_loss(out, np.zeros_like(out))
    (dw, db), _ = nn.backward(net, cache, g)
    assert dw[0, 0] == pytest.approx(24.0)


def test_stale_cache_rejected():
    net = Network([nn.dense(2)], (2,))
    other = Network([nn.dense(2)], (2,))
    out, cache = nn.forward(net, np.ones((1, 2), np.float32))
    with pytest.raises(StaleCacheError):
        nn.backward(other, cache, np.ones_like(out))
    grads, _ = nn.backward(net, cache, np.ones_like(out))
    nn.apply_step(net, OptimizerState("sgd", lr=0.1), grads)
    with pytest.raises(StaleCacheError):
        nn.backward(net, cache, np.ones_like(out))


def test_mse_loss_examples():
    loss, g = nn.mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    assert loss == 0 and np.all(g == 0)
    loss, _ = nn.mse_loss(np.array([1.0, 2.0]), np.zeros(2))
    assert loss == 2.5
    _, g = nn.mse_loss(np.array([0.0]), np.array([3.0]))
    assert g.tolist() == [-6.0]
    with pytest.raises(ShapeError):
        nn.mse_loss(np.zeros(2), np.zeros(3))


@pytest.mark.parametrize("kind", ["sgd", "sgd-momentum"])
def test_optimizer_examples(kind):
    p = [np.array([1.0])]
    nn.optimizer_step(OptimizerState(kind, lr=0.0), p, [np.array([5.0])])
    assert p[0][0] == 1.0
    p = [np.array([1.0])]
    nn.optimizer_step(OptimizerState(kind, lr=0.1), p, [np.array([2.0])])
    assert p[0][0] == pytest.approx(0.8)
    p = [np.array([1.0])]
    nn.optimizer_step(OptimizerState(kind, lr=0.1, weight_decay=0.5), p, [np.array([0.0])])
    assert p[0][0] == pytest.approx(0.95)


def test_optimizer_rejects_non_finite_gradient():
    p = [np.array([1.0])]
    with pytest.raises(FloatingPointError):
        nn.optimizer_step(OptimizerState(), p, [np.array([np.nan])])
    assert p[0][0] == 1.0


def test_momentum_buffers_match_parameter_shapes():
    state = OptimizerState()
    params = [np.zeros((2, 3)), np.zeros(4)]
    nn.optimizer_step(state, params, [np.ones((2, 3)), np.ones(4)])
    assert [v.shape for v in state.velocities] == [(2, 3), (4,)]


def _check_network(specs, in_shape, out_fn=None, seed=0, batch=2):
    net = Network(specs, in_shape, seed=seed).astype(np.float64)
    rng = np.random.default_rng(seed + 100)
    x = rng.standard_normal((batch,) + tuple(in_shape))
    target = rng.standard_normal((batch,) + net.output_shape)
    # random biases so relu kinks are not aligned at zero
    for p in net.parameters():
        if p.ndim == 1:
            p[...] = rng.standard_normal(p.shape) * 0.1

    def loss():
        out, _ = nn.forward(net, x)
        return nn.mse_loss(out, target)[0]

    out, cache = nn.forward(net, x)
    _, g = nn.mse_loss(out, target)
    grads, dx = nn.backward(net, cache, g)
    assert [gr.shape for gr in grads] == [p.shape for p in net.parameters()]
    numeric = numeric_grads(loss, net.parameters() + [x], signature=relu_pattern([net], lambda: [x]))
    assert net.n_params() <= 500
    assert skipped_fraction(numeric) <= MAX_SKIPPED
    return max_relative_error(grads + [dx], numeric)


@pytest.mark.parametrize("name,specs,in_shape", [
    ("dense", [nn.dense(4)], (5,)),
    ("relu", [nn.dense(6), nn.relu(), nn.dense(2)], (3,)),
    ("sigmoid", [nn.dense(4), nn.sigmoid()], (3,)),
    ("conv", [nn.conv(2, 3, 1, 1)], (2, 4, 4)),
    ("conv-strided", [nn.conv(3, 4, 2, 1), nn.flatten(), nn.dense(2)], (1, 6, 6)),
    ("flatten-reshape", [nn.flatten(), nn.dense(8), nn.reshape(2, 2, 2), nn.conv(1, 2)], (1, 3, 3)),
])
def test_gradient_check_per_layer(name, specs, in_shape):
    assert _check_network(specs, in_shape, seed=len(name)) < TOL


@given(st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_gradient_check_random_small_networks(seed):
    specs = [nn.conv(2, 3, 1, 1), nn.relu(), nn.conv(2, 2, 2, 0), nn.flatten(), nn.dense(5),
             nn.relu(), nn.dense(3), nn.sigmoid()]
    assert _check_network(specs, (1, 4, 4), seed=seed) < TOL


def test_forward_backward_deterministic():
    def run():
        net = Network([nn.conv(4, 3, 1, 1), nn.relu(), nn.flatten(), nn.dense(3)], (2, 5, 5), seed=11)
        x = np.random.default_rng(5).standard_normal((3, 2, 5, 5)).astype(np.float32)
        out, cache = nn.forward(net, x)
        grads, dx = nn.backward(net, cache, np.ones_like(out))
        return out, grads, dx

    a, b = run(), run()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[2], b[2])
    assert all(np.array_equal(x, y) for x, y in zip(a[1], b[1]))


def test_sgd_on_convex_quadratic_is_monotone():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((40, 3))
    y = x @ np.array([[1.0], [-2.0], [0.5]]) + 0.3
    net = Network([nn.dense(1)], (3,), seed=0).astype(np.float64)
    state = OptimizerState("sgd", lr=0.05)
    losses = []
    for _ in range(200):
        out, cache = nn.forward(net, x)
        loss, g = nn.mse_loss(out, y)
        losses.append(loss)
        grads, _ = nn.backward(net, cache, g)
        nn.apply_step(net, state, grads)
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-6


def test_non_finite_forward_raises():
    net = Network([nn.dense(1)], (1,))
    with pytest.raises(FloatingPointError):
        nn.forward(net, np.array([[np.inf]], np.float32))
