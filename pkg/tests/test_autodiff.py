import numpy as np
import pytest

from diraclift import autodiff
from diraclift.autodiff import Tensor, concat, sigmoid, square, ssum, tanh

from conftest import rng


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = g.ravel()
    for i in range(flat_x.size):
        xp, xm = x.copy(), x.copy()
        xp.ravel()[i] += h
        xm.ravel()[i] -= h
        flat_g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check(build, shape, seed=0):
    x = rng(seed).normal(size=shape)
    t = Tensor(x)
    loss = build(t)
    loss.backward()
    num = numeric_grad(lambda arr: float(autodiff.value_of(build(Tensor(arr)))), x)
    assert np.allclose(t.grad, num, rtol=1e-6, atol=1e-9)


def test_add_mul_broadcast():
    check(lambda t: ssum(square(t + np.array([1.0, -2.0, 0.5]))), (4, 3))
    check(lambda t: ssum(t * rng(1).normal(size=(4, 3)) + 2.0 * t), (4, 3))


def test_matmul_both_sides():
    W = rng(2).normal(size=(3, 5))
    check(lambda t: ssum(square(t @ W)), (4, 3))
    check(lambda t: ssum(square(W.T @ t.T)), (4, 3))
    check(lambda t: ssum(t.T @ t), (4, 3))


def test_activations():
    check(lambda t: ssum(tanh(t) * sigmoid(t)), (6,))
    check(lambda t: ssum(square(sigmoid(t @ np.eye(3) - 0.5))), (2, 3))


def test_sub_neg_rsub():
    check(lambda t: ssum(square(1.0 - t)), (5,))
    check(lambda t: ssum(-t * t), (5,))
    check(lambda t: ssum(t - np.ones(5)), (5,))


def test_concat():
    base = rng(3).normal(size=(4, 2))

    def build(t):
        joined = concat([base, t, 2.0 * t], axis=1)
        return ssum(square(joined))

    check(build, (4, 3))


def test_diamond_reuse():
    # the same node consumed twice must accumulate both paths
    def build(t):
        y = tanh(t)
        return ssum(y * y + y)

    check(build, (7,))


def test_backward_requires_scalar():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        (t * 2.0).backward()


def test_numpy_defers_to_tensor():
    x = np.ones((2, 3))
    t = Tensor(np.ones((3, 2)))
    assert isinstance(x @ t, Tensor)
    assert isinstance(x.T + t, Tensor)
    assert isinstance(x.T * t, Tensor)
    assert isinstance(x.T - t, Tensor)


def test_grad_unused_is_none():
    t = Tensor(np.ones(3))
    u = Tensor(np.ones(3))
    loss = ssum(square(t))
    loss.backward()
    assert u.grad is None
    assert np.allclose(t.grad, 2.0 * np.ones(3))
