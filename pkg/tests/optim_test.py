"""
Tests for the Adam optimizer.
"""

import numpy as np
import pytest

from src.latent_domain_transfer.exceptions import GradientError
from src.latent_domain_transfer.layers import Parameter
from src.latent_domain_transfer.optim import Adam, AdamState, adam_step
from src.latent_domain_transfer.tensor import Tensor, backward, precision


def test_first_step_moves_by_learning_rate():
    with precision(np.float64):
        param = Parameter(np.array([1.0, -2.0, 3.0]))
        param.grad = np.array([0.5, -4.0, 1e-3])
        Adam([param], lr=0.01).step()
        # bias-corrected first step is lr * g / (|g| + eps)
        np.testing.assert_allclose(param.data, [0.99, -1.99, 2.99], atol=1e-6)


def test_matches_reference_update():
    with precision(np.float64):
        param = Parameter(np.array([0.3]))
        optimizer = Adam([param], lr=0.1, beta1=0.5, beta2=0.9, eps=1e-8)
        m = v = 0.0
        value = 0.3
        for t, g in enumerate([1.0, -2.0, 0.5], start=1):
            param.grad = np.array([g])
            optimizer.step()
            m = 0.5 * m + 0.5 * g
            v = 0.9 * v + 0.1 * g * g
            value -= 0.1 * (m / (1 - 0.5 ** t)) / (np.sqrt(v / (1 - 0.9 ** t)) + 1e-8)
            assert param.data[0] == pytest.approx(value, rel=1e-9)


def test_step_clears_gradients():
    param = Parameter(np.ones(2))
    param.grad = np.ones(2)
    optimizer = Adam([param])
    optimizer.step()
    assert param.grad is None
    with pytest.raises(GradientError):
        optimizer.step()


def test_step_keeps_dtype():
    param = Parameter(np.ones(3))
    param.grad = np.ones(3, dtype=np.float64)
    Adam([param]).step()
    assert param.dtype == np.float32


def test_minimizes_quadratic():
    with precision(np.float64):
        param = Parameter(np.array([5.0, -3.0]))
        target = Tensor(np.array([1.0, 2.0]))
        optimizer = Adam([param], lr=0.1)
        for _ in range(500):
            backward((param - target).square().sum())
            optimizer.step()
        np.testing.assert_allclose(param.data, [1.0, 2.0], atol=1e-2)


def test_zero_grad():
    params = [Parameter(np.ones(2)), Parameter(np.ones(3))]
    for param in params:
        param.grad = np.ones_like(param.data)
    Adam(params).zero_grad()
    assert all(param.grad is None for param in params)


def test_adam_step_creates_moments_on_first_call():
    with precision(np.float64):
        params = [Parameter(np.zeros((2, 2))), Parameter(np.zeros(3))]
        state = AdamState(lr=0.5)
        for param in params:
            param.grad = np.ones_like(param.data)
        adam_step(params, state)
        assert state.t == 1
        assert [m.shape for m in state.m] == [(2, 2), (3,)]
        np.testing.assert_allclose(state.m[1], 0.1)
        np.testing.assert_allclose(params[0].data, -0.5, atol=1e-6)
