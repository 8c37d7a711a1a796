"""Tests for the MLP backend."""

import json

import numpy as np
import pytest

from kooplift.mlp import (
    MlpNetwork,
    mlp_backward,
    mlp_forward,
    mlp_from_dict,
    mlp_init,
    mlp_to_dict,
    selu,
    selu_deriv,
)


def test_selu_reference_values():
    assert selu(0.0) == 0.0
    assert selu(1.0) == pytest.approx(1.0507009873554805, rel=1e-12)
    # Negative branch: lambda * alpha * (e^x - 1).
    assert selu(-1.0) == pytest.approx(
        1.0507009873554805 * 1.6732632423543772 * (np.exp(-1.0) - 1.0), rel=1e-12
    )
    assert selu_deriv(2.0) == pytest.approx(1.0507009873554805, rel=1e-12)
    assert selu_deriv(-1.0) == pytest.approx(
        1.0507009873554805 * 1.6732632423543772 * np.exp(-1.0), rel=1e-12
    )


def test_zero_network_outputs_zero():
    net = mlp_init([2, 4, 3], seed=0)
    for w, b in zip(net.weights, net.biases):
        w[...] = 0.0
        b[...] = 0.0
    assert np.all(mlp_forward(net, [1.0, -2.0]) == 0.0)


def test_single_affine_layer():
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([0.5, -0.5])
    net = MlpNetwork(shape=[2, 2], weights=[w], biases=[b])
    x = np.array([1.0, 1.0])
    assert np.allclose(mlp_forward(net, x), w @ x + b, atol=1e-15)


def test_final_layer_scale_covariance():
    net = mlp_init([2, 5, 3], seed=3)
    x = np.array([0.3, -0.7])
    before = mlp_forward(net, x)
    net.weights[-1] *= 2.0
    net.biases[-1] *= 2.0
    assert np.allclose(mlp_forward(net, x), 2.0 * before, atol=1e-12)


def test_pendulum_table_parameter_count():
    # 8 hidden layers of 6 neurons, 2 states in, 2 learned observables out.
    net = mlp_init([2] + [6] * 8 + [2], seed=0)
    assert net.n_params == 326


def test_twobody_table_parameter_count():
    # 3 hidden layers of 25 neurons, 4 states in, 6 learned observables out.
    net = mlp_init([4, 25, 25, 25, 6], seed=0)
    assert net.n_params == 1581


def test_init_deterministic_lecun():
    a = mlp_init([3, 50, 2], seed=7)
    b = mlp_init([3, 50, 2], seed=7)
    assert np.array_equal(a.get_params(), b.get_params())
    assert np.all(a.biases[0] == 0.0)
    # 50x3 sample is enough to pin the scale loosely.
    assert a.weights[0].std() == pytest.approx(1.0 / np.sqrt(3.0), rel=0.35)


def test_forward_batch_matches_loop():
    net = mlp_init([3, 6, 4], seed=11)
    xs = np.random.default_rng(1).standard_normal((7, 3))
    batch = mlp_forward(net, xs)
    singles = np.array([mlp_forward(net, row) for row in xs])
    assert np.allclose(batch, singles, atol=1e-14)


def test_backward_zero_upstream():
    net = mlp_init([2, 4, 2], seed=5)
    grads, dx = mlp_backward(net, [0.1, 0.2], np.zeros(2))
    assert np.all(grads == 0.0)
    assert np.all(dx == 0.0)


def test_backward_negative_branch_path():
    # One layer + identity readout; input < 0 exercises the exponential branch.
    net = mlp_init([1, 1, 1], seed=0)
    net.weights[0][...] = 1.0
    net.biases[0][...] = 0.0
    net.weights[1][...] = 1.0
    net.biases[1][...] = 0.0
    x = np.array([-1.0])
    _, dx = mlp_backward(net, x, np.array([1.0]))
    assert dx[0] == pytest.approx(
        1.0507009873554805 * 1.6732632423543772 * np.exp(-1.0), rel=1e-12
    )


def _fd_check(net, x, upstream, h=1e-5, tol=1e-5):
    grads, dx = mlp_backward(net, x, upstream)
    params = net.get_params()

    def objective(p):
        net.set_params(p)
        return float(np.sum(upstream * mlp_forward(net, x)))

    fd = np.empty_like(params)
    for i in range(params.size):
        bumped = params.copy()
        bumped[i] += h
        hi = objective(bumped)
        bumped[i] -= 2 * h
        lo = objective(bumped)
        fd[i] = (hi - lo) / (2 * h)
    net.set_params(params)
    assert np.max(np.abs(fd - grads) / (1.0 + np.abs(fd))) <= tol

    fd_x = np.empty_like(np.asarray(x, dtype=float))
    for i in range(fd_x.size):
        xp = np.array(x, dtype=float)
        xp[i] += h
        hi = float(np.sum(upstream * mlp_forward(net, xp)))
        xp[i] -= 2 * h
        lo = float(np.sum(upstream * mlp_forward(net, xp)))
        fd_x[i] = (hi - lo) / (2 * h)
    assert np.max(np.abs(fd_x - dx) / (1.0 + np.abs(fd_x))) <= tol


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(13)
    for trial, shape in enumerate(([2, 3, 2], [1, 4, 4, 1], [3, 2])):
        net = mlp_init(shape, seed=trial + 50)
        x = rng.standard_normal(shape[0])
        upstream = rng.standard_normal(shape[-1])
        _fd_check(net, x, upstream)


def test_backward_batch_accumulates():
    net = mlp_init([2, 3, 2], seed=9)
    xs = np.array([[0.5, -0.2], [-1.1, 0.8]])
    us = np.array([[1.0, 0.0], [0.0, 1.0]])
    grads_batch, dx_batch = mlp_backward(net, xs, us)
    g0, d0 = mlp_backward(net, xs[0], us[0])
    g1, d1 = mlp_backward(net, xs[1], us[1])
    assert np.allclose(grads_batch, g0 + g1, atol=1e-12)
    assert np.allclose(dx_batch, np.vstack([d0, d1]), atol=1e-12)


def test_json_roundtrip_exact():
    net = mlp_init([2, 5, 3], seed=31)
    doc = json.loads(json.dumps(mlp_to_dict(net)))
    back = mlp_from_dict(doc)
    assert back.shape == net.shape
    assert np.array_equal(back.get_params(), net.get_params())
    x = np.array([0.2, -0.4])
    assert np.array_equal(mlp_forward(back, x), mlp_forward(net, x))


def test_set_params_rejects_wrong_size():
    net = mlp_init([2, 3], seed=0)
    with pytest.raises(ValueError):
        net.set_params(np.zeros(net.n_params + 1))
