"""
Tests for the tensor core: primitive values, reverse-mode gradients against
central differences, graph bookkeeping and the no_grad / precision contexts.
"""

import numpy as np
import pytest

from src.latent_domain_transfer.exceptions import GraphError, NumericalError, ShapeError
from src.latent_domain_transfer.tensor import (
    Tensor,
    backward,
    concat,
    current_graph,
    default_dtype,
    finite_difference_grad,
    no_grad,
    precision,
)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check_grad(f, x: Tensor, tol: float = 1e-6) -> None:
    loss = f(x)
    backward(loss)
    numeric = finite_difference_grad(f, x, h=1e-6)
    assert x.grad is not None
    assert relative_error(x.grad, numeric.data) < tol


@pytest.fixture
def values(rng):
    with precision(np.float64):
        yield lambda *shape: Tensor(rng.standard_normal(shape), requires_grad=True)


def test_default_dtype_is_float32():
    assert default_dtype() == np.float32
    assert Tensor([1.0, 2.0]).dtype == np.float32


def test_precision_context_restores_dtype():
    with precision(np.float64):
        assert Tensor(1.0).dtype == np.float64
    assert Tensor(1.0).dtype == np.float32


@pytest.mark.parametrize("name, f", [
    ("add_broadcast", lambda x: (x + Tensor(np.arange(4.0))).square().sum()),
    ("sub_scalar", lambda x: (2.0 - x).square().mean()),
    ("mul", lambda x: (x * x * 3.0).sum()),
    ("tanh", lambda x: x.tanh().sum()),
    ("sigmoid", lambda x: x.sigmoid().sum()),
    ("exp", lambda x: x.exp().mean()),
    ("square_mean_axis", lambda x: x.square().mean(axis=1).sum()),
    ("sum_keepdims", lambda x: (x.sum(axis=0, keepdims=True) * x).sum()),
    ("reshape", lambda x: (x.reshape(4, 3) @ Tensor(np.ones((3, 2)))).square().sum()),
    ("log_softmax", lambda x: (x.log_softmax(axis=1) * Tensor(np.eye(4)[[0, 3, 1]])).sum()),
])
def test_primitive_gradients(values, name, f):
    with precision(np.float64):
        check_grad(f, values(3, 4))


def test_matmul_gradient(values):
    with precision(np.float64):
        w = values(4, 2)
        check_grad(lambda x: (x @ w).tanh().sum(), values(3, 4))
        check_grad(lambda m: (Tensor(np.ones((3, 4))) @ m).square().sum(), w)


def test_log_gradient(values):
    with precision(np.float64):
        x = values(5)
        x.data = np.abs(x.data) + 0.5
        check_grad(lambda t: t.log().sum(), x)


def test_relu_and_clip_gradients(rng):
    with precision(np.float64):
        # keep values away from the kinks at 0 and at the clip bounds
        data = rng.uniform(0.1, 0.9, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
        x = Tensor(data, requires_grad=True)
        check_grad(lambda t: (t.relu() * 2.0).sum(), x)
        x.grad = None
        check_grad(lambda t: t.clip(-0.5, 0.5).square().sum(), x)


def test_concat_gradient_splits(values):
    with precision(np.float64):
        a, b = values(2, 3), values(2, 5)
        loss = (concat([a, b], axis=1) * Tensor(np.arange(16.0).reshape(2, 8))).sum()
        backward(loss)
        np.testing.assert_allclose(a.grad, np.arange(16.0).reshape(2, 8)[:, :3])
        np.testing.assert_allclose(b.grad, np.arange(16.0).reshape(2, 8)[:, 3:])


def test_gradients_accumulate_across_uses(values):
    with precision(np.float64):
        x = values(3)
        backward((x * 2.0 + x * 3.0).sum())
        np.testing.assert_allclose(x.grad, np.full(3, 5.0))


def test_backward_clears_graph(values):
    with precision(np.float64):
        x = values(3)
        loss = x.square().sum()
        assert len(current_graph()) > 0
        backward(loss)
        assert len(current_graph()) == 0
        with pytest.raises(GraphError):
            backward(loss)


def test_backward_needs_scalar(values):
    with precision(np.float64):
        x = values(3)
        with pytest.raises(ShapeError):
            backward(x * 2.0)
    current_graph().clear()


def test_no_grad_records_nothing(values):
    with precision(np.float64):
        x = values(3)
        with no_grad():
            y = (x * 2.0).sum()
        assert len(current_graph()) == 0
        assert not y.requires_grad
        with pytest.raises(GraphError):
            backward(y)


def test_constants_are_not_recorded():
    Tensor(np.ones(3)) * 2.0
    assert len(current_graph()) == 0


def test_non_finite_output_raises():
    with pytest.raises(NumericalError):
        Tensor(np.array([0.0, 1.0])).log()
    with pytest.raises(NumericalError):
        Tensor(np.array([1000.0])).exp()


def test_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))).reshape(4, 2)
    with pytest.raises(TypeError):
        Tensor(np.ones(2)) / Tensor(np.ones(2))


def test_sigmoid_is_stable_for_large_inputs():
    out = Tensor(np.array([-500.0, 0.0, 500.0])).sigmoid().data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=2e-7)
    assert np.all((out > 0) & (out < 1))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("value", [-30.0, -20.0, 20.0, 30.0])
def test_sigmoid_stays_inside_unit_interval(dtype, value):
    with precision(dtype):
        x = Tensor(np.array([value]))
        out = x.sigmoid()
        backward(out.sum())
    assert out.data.dtype == dtype
    assert 0.0 < out.data[0] < 1.0
    assert x.grad[0] > 0.0


def test_sigmoid_is_exact_away_from_saturation():
    with precision(np.float64):
        x = np.array([-20.0, -3.0, 0.5, 7.0])
        np.testing.assert_allclose(Tensor(x).sigmoid().data, 1.0 / (1.0 + np.exp(-x)), rtol=1e-14)


def test_finite_difference_restores_input(values):
    with precision(np.float64):
        x = values(4)
        before = x.data.copy()
        grad = finite_difference_grad(lambda t: t.square().sum(), x)
        np.testing.assert_array_equal(x.data, before)
        np.testing.assert_allclose(grad.data, 2 * before, rtol=1e-6)
        with pytest.raises(ValueError):
            finite_difference_grad(lambda t: t.sum(), x, h=0.0)
