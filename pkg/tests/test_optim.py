import numpy as np
import pytest

from pmss import ops
from pmss.optim import SGD, OptimError
from pmss.tensor import Tensor, backward


def _param(values):
    return Tensor(np.array(values, dtype=float), requires_grad=True)


def test_zero_lr_leaves_params_unchanged():
    p = _param([1.0, -2.0])
    p.grad = np.array([5.0, 5.0])
    SGD([p], lr=0.0, momentum=0.0).step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_plain_step_analytic():
    p = _param([1.0])
    p.grad = np.array([0.5])
    SGD([p], lr=0.1, momentum=0.0).step()
    np.testing.assert_allclose(p.data, [0.95], rtol=1e-15)


def test_momentum_two_step_recurrence():
    # v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.29
    p = _param([0.0])
    opt = SGD([p], lr=0.1, momentum=0.9)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    np.testing.assert_allclose(p.data, [-0.29], rtol=1e-12)


def test_step_clears_grads():
    p = _param([1.0])
    p.grad = np.array([1.0])
    opt = SGD([p], lr=0.1, momentum=0.5)
    opt.step()
    assert p.grad is None
    with pytest.raises(OptimError):
        opt.step()


def test_param_groups_use_their_own_lr():
    a, b = _param([0.0]), _param([0.0])
    a.grad = np.array([1.0])
    b.grad = np.array([1.0])
    SGD(param_groups=[([a], 0.1), ([b], 1.0)], momentum=0.0).step()
    np.testing.assert_allclose(a.data, [-0.1])
    np.testing.assert_allclose(b.data, [-1.0])


def test_weight_decay_adds_to_gradient():
    p = _param([2.0])
    p.grad = np.array([0.0])
    SGD([p], lr=0.1, momentum=0.0, weight_decay=0.5).step()
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])


def test_invalid_hyperparams_reject():
    p = _param([1.0])
    with pytest.raises(ValueError):
        SGD([p], lr=0.1, momentum=1.0)
    with pytest.raises(ValueError):
        SGD([p], lr=-0.1)


def test_training_reduces_simple_quadratic():
    p = _param([3.0])
    opt = SGD([p], lr=0.03, momentum=0.9)
    for _ in range(200):
        loss = ops.sum_all(ops.mul(p, p))
        backward(loss)
        opt.step()
    assert abs(p.data[0]) < 1e-3
