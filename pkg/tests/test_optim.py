"""Tests for the hand-rolled optimizers."""

import numpy as np
import pytest

from kooplift.optim import AdamW, Lbfgs


def quadratic(a, b):
    def fun(x):
        return 0.5 * x @ a @ x - b @ x, a @ x - b

    return fun


def rosenbrock(x):
    f = 100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2
    g = np.array(
        [
            -400.0 * x[0] * (x[1] - x[0] ** 2) - 2.0 * (1.0 - x[0]),
            200.0 * (x[1] - x[0] ** 2),
        ]
    )
    return f, g


def test_adamw_first_step_is_signed_lr():
    opt = AdamW(n_params=2, lr=0.1)
    params = np.array([1.0, -1.0])
    grad = np.array([3.0, -0.5])
    out = opt.step(params, grad)
    # After bias correction the first update is lr * g / (|g| + eps).
    assert np.allclose(out, params - 0.1 * np.sign(grad), atol=1e-6)


def test_adamw_decay_is_decoupled():
    opt = AdamW(n_params=1, lr=0.1, weight_decay=0.5)
    params = np.array([2.0])
    out = opt.step(params, np.zeros(1))
    assert out[0] == pytest.approx(2.0 * (1.0 - 0.1 * 0.5), abs=1e-12)


def test_adamw_minimizes_quadratic():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((3, 3))
    a = m @ m.T + 0.5 * np.eye(3)
    b = rng.standard_normal(3)
    fun = quadratic(a, b)
    x = np.zeros(3)
    opt = AdamW(n_params=3, lr=0.05)
    for _ in range(2000):
        _, g = fun(x)
        x = opt.step(x, g)
    target = np.linalg.solve(a, b)
    assert np.max(np.abs(x - target)) < 1e-3


def test_lbfgs_solves_quadratic():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((6, 6))
    a = m @ m.T + np.eye(6)
    b = rng.standard_normal(6)
    res = Lbfgs(lr=1.0).minimize(quadratic(a, b), np.zeros(6), max_iter=50)
    # Near the optimum the line search dies on float noise; the point stands.
    assert np.max(np.abs(res.x - np.linalg.solve(a, b))) < 1e-7


def test_lbfgs_monotone_best_value():
    rng = np.random.default_rng(2)
    m = rng.standard_normal((4, 4))
    a = m @ m.T + np.eye(4)
    fun = quadratic(a, rng.standard_normal(4))
    f0 = fun(np.zeros(4))[0]
    res = Lbfgs(lr=1.0).minimize(fun, np.zeros(4), max_iter=5)
    assert res.value <= f0


def test_lbfgs_rosenbrock():
    res = Lbfgs(lr=1.0).minimize(rosenbrock, np.array([-1.2, 1.0]), max_iter=200)
    assert np.max(np.abs(res.x - 1.0)) < 1e-6


def test_lbfgs_respects_iteration_budget():
    calls = 0

    def fun(x):
        nonlocal calls
        calls += 1
        return float(x @ x), 2.0 * x

    res = Lbfgs(lr=1.0).minimize(fun, np.ones(3), max_iter=3)
    assert res.n_iter <= 3
    assert res.n_evals == calls


def test_lbfgs_deterministic():
    fun = quadratic(np.diag([1.0, 10.0]), np.array([1.0, 1.0]))
    a = Lbfgs(lr=1.0).minimize(fun, np.array([5.0, 5.0]), max_iter=30)
    b = Lbfgs(lr=1.0).minimize(fun, np.array([5.0, 5.0]), max_iter=30)
    assert np.array_equal(a.x, b.x)
    assert a.value == b.value


def test_lbfgs_already_converged():
    fun = quadratic(np.eye(2), np.zeros(2))
    res = Lbfgs(lr=1.0).minimize(fun, np.zeros(2), max_iter=10)
    assert res.n_iter == 0
    assert res.stop_reason == "grad_tol"


def test_lbfgs_small_lr_still_descends():
    # Tiny trial steps force the expansion phase of the line search to work.
    fun = quadratic(np.diag([1.0, 100.0]), np.array([1.0, 1.0]))
    x0 = np.array([3.0, 3.0])
    f0 = fun(x0)[0]
    res = Lbfgs(lr=1e-4).minimize(fun, x0, max_iter=40)
    assert res.value < f0


def test_wolfe_conditions_on_accepted_step():
    # Instrument one iteration by replaying the accepted point.
    a = np.diag([2.0, 30.0])
    b = np.array([1.0, -2.0])
    fun = quadratic(a, b)
    x0 = np.array([4.0, -4.0])
    f0, g0 = fun(x0)
    res = Lbfgs(lr=1.0).minimize(fun, x0, max_iter=1)
    step = res.x - x0
    if np.any(step != 0.0):
        f1, g1 = fun(res.x)
        dg0 = g0 @ step
        assert f1 <= f0 + 1e-4 * dg0 + 1e-12
        assert abs(g1 @ step) <= 0.9 * abs(dg0) + 1e-12
