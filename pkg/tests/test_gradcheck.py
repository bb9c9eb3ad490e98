"""Finite-difference checks of every differentiable kernel."""

import numpy as np
import pytest

from convgru import ops
from convgru.gradcheck import grad_check
from convgru.ops import PaddingMode
from convgru.tensor import Tensor


def t64(rng, *shape):
    return Tensor(rng.normal(size=shape).astype(np.float64))


def test_linear_function_is_exact():
    rng = np.random.default_rng(0)
    w = rng.normal(size=7)

    def f(inputs):
        return (inputs[0] * Tensor(w)).sum()

    assert grad_check(f, [t64(rng, 7)]) <= 1e-10


def test_conv_sigmoid_chain():
    rng = np.random.default_rng(1)
    x, k, b = t64(rng, 2, 5, 5), t64(rng, 3, 2, 3, 3), t64(rng, 3)

    def f(inputs):
        return ops.sigmoid(ops.conv2d(inputs[0], inputs[1], inputs[2], stride=2, mode=PaddingMode.SAME)).sum()

    assert grad_check(f, [x, k, b], eps=1e-5) <= 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_all_ops_randomized(seed):
    rng = np.random.default_rng(seed)
    checks = [
        (lambda i: ops.conv2d(i[0], i[1], i[2], stride=1, mode=PaddingMode.VALID).sum(),
         [t64(rng, 2, 4, 4), t64(rng, 2, 2, 3, 3), t64(rng, 2)]),
        (lambda i: ops.conv2d(i[0], i[1], stride=2, mode=PaddingMode.SAME).sum(),
         [t64(rng, 1, 5, 5), t64(rng, 2, 1, 3, 3)]),
        (lambda i: ops.maxpool2d(i[0], window=3, stride=2).sum(), [t64(rng, 2, 6, 6)]),
        (lambda i: ops.global_avg_pool(i[0]).sum(), [t64(rng, 3, 4, 4)]),
        (lambda i: ops.dense(i[0], i[1], i[2]).sum(), [t64(rng, 5), t64(rng, 3, 5), t64(rng, 3)]),
        (lambda i: ops.sigmoid(i[0]).sum(), [t64(rng, 8)]),
        (lambda i: ops.tanh(i[0]).sum(), [t64(rng, 8)]),
        (lambda i: ops.leaky_relu(i[0], alpha=0.1).sum(), [Tensor(rng.normal(size=8) + 0.05)]),
        (lambda i: ops.softmax_cross_entropy(i[0], 2).sum(), [t64(rng, 6)]),
        (lambda i: ops.dropout(i[0], 0.8, np.random.default_rng(99), training=True).sum(), [t64(rng, 12)]),
    ]
    for f, inputs in checks:
        for t in inputs:
            t.data = t.data.astype(np.float64)
        assert grad_check(f, inputs, eps=1e-5) <= 1e-4


def test_cross_entropy_gradient_tight():
    rng = np.random.default_rng(3)

    def f(inputs):
        return ops.softmax_cross_entropy(inputs[0], 1)

    assert grad_check(f, [t64(rng, 9)], eps=1e-5) <= 1e-6


def test_maxpool_gradient_first_occurrence_on_ties():
    x = Tensor(np.zeros((1, 3, 3), dtype=np.float64), requires_grad=True)
    ops.maxpool2d(x, window=3, stride=2).sum().backward()
    expect = np.zeros((1, 3, 3))
    expect[0, 0, 0] = 1.0
    np.testing.assert_array_equal(x.grad, expect)


def test_subsampled_check_matches_full_on_linear():
    rng = np.random.default_rng(5)

    def f(inputs):
        return (inputs[0] * 3.0).sum()

    assert grad_check(f, [t64(rng, 50)], max_coords=10) <= 1e-10
