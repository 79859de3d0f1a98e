from __future__ import annotations

import math

import numpy as np
import pytest

from rmnet import nn
from conftest import central_diff, rel_err


def test_two_layer_relu_forward_by_hand():
    net = nn.MLP((2, 2, 1), ("relu", "identity"), np.zeros(nn.n_params((2, 2, 1))))
    net.weights[0][...] = [[1.0, -1.0], [2.0, 0.5]]
    net.biases[0][...] = [0.0, -1.0]
    net.weights[1][...] = [[1.0, -2.0]]
    net.biases[1][...] = [0.5]
    out, _ = nn.forward(net, np.array([[1.0, 2.0]]))
    # hidden pre-activations (-1, 2) -> relu (0, 2) -> 0*1 + 2*(-2) + 0.5
    assert out[0, 0] == -3.5


def test_elu_values():
    net = nn.MLP((1, 1), ("elu",), np.array([1.0, 0.0]))
    out, _ = nn.forward(net, np.array([[-1.0], [0.0], [2.0]]))
    np.testing.assert_allclose(out[:, 0], [math.exp(-1) - 1, 0.0, 2.0], rtol=0, atol=1e-15)


@pytest.mark.parametrize("act", ["elu", "relu", "identity"])
def test_backward_matches_finite_differences(act, rng):
    net = nn.init((4, 7, 5, 2), (act, act, "identity"), seed=3)
    X = rng.normal(size=(6, 4))
    # keep relu pre-activations away from the kink
    R = rng.normal(size=(6, 2))

    def loss():
        out, _ = nn.forward(net, X)
        return float(np.sum(out * R))

    out, cache = nn.forward(net, X)
    grad, dx = nn.backward(net, cache, R)
    fd = central_diff(loss, net.flat)
    assert rel_err(grad.flat, fd) < 1e-4
    fd_x = central_diff(loss, X.reshape(-1)).reshape(X.shape)
    assert rel_err(dx, fd_x) < 1e-4


def test_mse_gradient_through_network(rng):
    net = nn.init((3, 8, 1), seed=1)
    X, y = rng.normal(size=(10, 3)), rng.normal(size=10)

    def loss():
        return float(np.mean((nn.forward(net, X)[0][:, 0] - y) ** 2))

    out, cache = nn.forward(net, X)
    grad, _ = nn.backward(net, cache, (2 * (out[:, 0] - y) / len(y))[:, None])
    assert rel_err(grad.flat, central_diff(loss, net.flat)) < 1e-4


def test_l2_penalty_gradient_and_biases_excluded():
    net = nn.init((3, 4, 2), seed=2)
    net.biases[0][...] = 5.0
    value, grad = nn.l2_penalty(net, 0.3)
    expected = 0.3 * sum(float(np.sum(w ** 2)) for w in net.weights)
    assert value == pytest.approx(expected, rel=1e-12)
    fd = central_diff(lambda: nn.l2_penalty(net, 0.3)[0], net.flat)
    assert rel_err(grad.flat, fd) < 1e-4
    assert np.all(grad.biases[0] == 0)


def test_l2_rejects_negative():
    with pytest.raises(ValueError):
        nn.l2_penalty(nn.init((2, 1)), -1.0)


def test_adam_two_steps_hand_trace():
    params = np.array([1.0])
    state = nn.AdamState.for_params(1, lr=0.1)
    # hand-rolled reference using plain floats
    p, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate([2.0, -1.0], start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        nn.adam_step(params, np.array([g]), state)
        assert params[0] == pytest.approx(p, abs=1e-12)
    assert state.t == 2
    assert params[0] == pytest.approx(0.873366, abs=1e-6)


def test_adam_zero_gradient_leaves_params():
    params = np.arange(5.0)
    state = nn.AdamState.for_params(5, lr=0.5)
    for _ in range(3):
        nn.adam_step(params, np.zeros(5), state)
    np.testing.assert_array_equal(params, np.arange(5.0))


def test_adam_nonfinite_gradient_names_tensor():
    net = nn.init((2, 3, 1), seed=0)
    grads = np.zeros_like(net.flat)
    layout = nn.flat_layout({"ext": net})
    grads[layout[2][1].start] = np.nan  # first entry of weights[1]
    with pytest.raises(FloatingPointError, match=r"ext\.weights\[1\]"):
        nn.adam_step(net.flat, grads, nn.AdamState.for_params(net.flat.size), layout)


def test_init_variance_and_zero_bias():
    net = nn.init((64, 1563), ("identity",), seed=7)
    w = net.weights[0]
    assert w.size > 100_000
    assert abs(w.var() / (2 / 64) - 1) < 0.05
    assert np.all(net.biases[0] == 0)


def test_init_determinism():
    a, b = nn.init((3, 5, 1), seed=11), nn.init((3, 5, 1), seed=11)
    np.testing.assert_array_equal(a.flat, b.flat)


def test_shape_errors():
    net = nn.init((3, 2))
    with pytest.raises(nn.ShapeError):
        nn.forward(net, np.zeros((4, 5)))
    with pytest.raises(nn.ShapeError):
        nn.init((3,))
    with pytest.raises(nn.ShapeError):
        nn.MLP((3, 2), ("elu", "elu"), np.zeros(8))


def test_views_share_flat_buffer():
    net = nn.init((2, 3, 1), seed=0)
    net.flat[:] = 0
    assert np.all(net.weights[0] == 0)
    net.weights[1][0, 0] = 9.0
    assert 9.0 in net.flat


def test_checkpoint_round_trip_bitwise(tmp_path):
    nets = {"a": nn.init((3, 5, 2), seed=1), "b": nn.init((2, 1), ("identity",), seed=2)}
    nets["a"].flat[0] = 1 / 3
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, nets, {"kind": "x", "alpha": 0.3})
    loaded, meta = nn.load_checkpoint(path)
    assert meta == {"kind": "x", "alpha": 0.3}
    for k in nets:
        assert loaded[k].sizes == nets[k].sizes
        assert loaded[k].activations == nets[k].activations
        assert np.array_equal(loaded[k].flat, nets[k].flat)
    X = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(nn.forward(loaded["a"], X)[0], nn.forward(nets["a"], X)[0])


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_text("hello\n")
    with pytest.raises(ValueError):
        nn.load_checkpoint(p)
