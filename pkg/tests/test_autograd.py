"""Reverse-mode gradients: trivial identities, finite differences, errors."""

import numpy as np
import pytest

from cfsam import tensor as T
from cfsam.tensor import Tensor

from oracles import central_difference


def test_sum_gradient_is_ones():
    x = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
    T.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_half_square_gradient_is_x():
    x = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
    loss = T.mul(T.sum_all(T.mul(x, x)), 0.5)
    T.backward(loss)
    np.testing.assert_allclose(x.grad, x.data, atol=1e-12)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = T.mul(x, 2.0)
    with pytest.raises(T.TensorError):
        T.backward(y)


def test_backward_twice_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = T.sum_all(x)
    T.backward(loss)
    with pytest.raises(T.TensorError):
        T.backward(loss)


def test_grad_accumulates_over_shared_input():
    x = Tensor(np.array([2.0]), requires_grad=True)
    loss = T.sum_all(T.add(x, x))
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0])


def _fd_check(build_loss, params, seed_note="", tol=1e-4, h=1e-5):
    for p in params:
        p.zero_grad()
    T.backward(build_loss())
    for p in params:
        numeric = central_difference(lambda: build_loss().item(), p.data, h)
        analytic = p.grad
        denom = np.maximum(1.0, np.abs(analytic))
        err = np.max(np.abs(analytic - numeric) / denom)
        assert err < tol, f"{seed_note}: rel err {err:.2e}"


@pytest.mark.parametrize("seed", range(10))
def test_composite_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    g = Tensor(rng.standard_normal(4), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)

    def loss():
        h = T.matmul(x, w)
        h = T.layer_norm(h, g, b)
        h = T.softmax(h)
        h = T.relu(T.add(h, x))
        return T.sum_all(T.mul(h, h))

    _fd_check(loss, [x, w, g, b], f"seed {seed}")


@pytest.mark.parametrize("seed", range(3))
def test_conv2d_gradients(seed):
    rng = np.random.default_rng(seed + 100)
    x = Tensor(rng.standard_normal((4, 5, 2)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 3, 2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)

    def loss():
        out = T.conv2d(x, w, b, padding=1)
        return T.sum_all(T.mul(out, out))

    _fd_check(loss, [x, w, b], f"seed {seed}")


def test_interp_take_slice_concat_gradients():
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((2, 5)), requires_grad=True)

    def loss():
        up = T.interp_linear_1d(x, 8)
        picked = T.take(up, 1, [0, 2, 4, 6, 2])
        halves = T.concat([T.slice_axis(picked, 1, 0, 3), T.slice_axis(picked, 1, 3, 2)], axis=1)
        return T.sum_all(T.mul(halves, halves))

    _fd_check(loss, [x])


def test_transpose_reshape_rowvec_gradients():
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)

    def loss():
        y = T.add_rowvec(T.transpose2d(x), b)
        return T.sum_all(T.mul(y, T.reshape(y, (4, 3))))

    _fd_check(loss, [x, b])
