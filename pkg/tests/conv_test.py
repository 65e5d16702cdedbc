"""
Tests for convolution, transposed convolution and batch normalization.
"""

import numpy as np
import pytest

from src.latent_domain_transfer.conv import (
    BatchNormState,
    batchnorm,
    conv2d,
    conv_output_size,
    conv_transpose2d,
    conv_transpose_output_size,
)
from src.latent_domain_transfer.exceptions import ShapeError
from src.latent_domain_transfer.tensor import Tensor, backward, finite_difference_grad, precision


def reference_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Direct loop cross-correlation."""
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, _, h, width = x.shape
    out_c, _, k, _ = w.shape
    out_h = (h - k) // stride + 1
    out_w = (width - k) // stride + 1
    out = np.zeros((n, out_c, out_h, out_w))
    for b in range(n):
        for o in range(out_c):
            for i in range(out_h):
                for j in range(out_w):
                    patch = x[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


@pytest.mark.parametrize("size, kernel, stride, padding", [(7, 3, 1, 0), (8, 4, 2, 1), (7, 3, 2, 1), (5, 5, 1, 2)])
def test_conv2d_matches_loop(rng, size, kernel, stride, padding):
    with precision(np.float64):
        x = rng.standard_normal((2, 3, size, size))
        w = rng.standard_normal((4, 3, kernel, kernel))
        out = conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
        assert out.shape[2] == conv_output_size(size, kernel, stride, padding)
        np.testing.assert_allclose(out.data, reference_conv(x, w, stride, padding), atol=1e-10)


@pytest.mark.parametrize("size, kernel, stride, padding", [(4, 3, 2, 1), (7, 4, 2, 1), (14, 4, 2, 1), (5, 3, 1, 1)])
def test_conv_transpose_is_adjoint(rng, size, kernel, stride, padding):
    """<conv2d(x), y> == <x, conv_transpose2d(y)> for the same kernel."""
    with precision(np.float64):
        out_size = conv_transpose_output_size(size, kernel, stride, padding)
        w = rng.standard_normal((3, 2, kernel, kernel))
        x = rng.standard_normal((2, 2, out_size, out_size))
        y = rng.standard_normal((2, 3, size, size))
        up = conv_transpose2d(Tensor(y), Tensor(w), stride=stride, padding=padding)
        assert up.shape == (2, 2, out_size, out_size)
        down = conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
        assert down.shape == y.shape
        assert abs(np.sum(down.data * y) - np.sum(x * up.data)) < 1e-9 * max(1.0, np.abs(np.sum(down.data * y)))


def test_decoder_extents():
    assert conv_transpose_output_size(4, 3, 2, 1) == 7
    assert conv_transpose_output_size(7, 4, 2, 1) == 14
    assert conv_transpose_output_size(14, 4, 2, 1) == 28
    assert conv_output_size(28, 4, 2, 1) == 14


def random_conv_cases(count: int, seed: int) -> list:
    """Seeded (batch, in_channels, out_channels, size, kernel, stride, padding, data_seed) draws."""
    draw = np.random.default_rng(seed)
    cases = []
    for _ in range(count):
        kernel = int(draw.integers(1, 6))
        size = int(draw.integers(max(kernel, 2), 17))
        stride = int(draw.integers(1, 4))
        padding = int(draw.integers(0, min(2, kernel - 1) + 1))
        n, c_in, c_out = int(draw.integers(1, 3)), int(draw.integers(1, 5)), int(draw.integers(1, 4))
        cases.append(pytest.param(n, c_in, c_out, size, kernel, stride, padding, int(draw.integers(2 ** 31)),
                                  id=f"n{n}-c{c_in}x{c_out}-s{size}-k{kernel}-st{stride}-p{padding}"))
    return cases


def random_batchnorm_cases(count: int, seed: int) -> list:
    """Seeded input shapes, NCHW or NC, with at least four values per channel."""
    draw = np.random.default_rng(seed)
    cases = []
    for _ in range(count):
        channels = int(draw.integers(1, 5))
        if draw.random() < 0.25:
            shape = (int(draw.integers(4, 9)), channels)
        else:
            shape = (2, channels, int(draw.integers(2, 17)), int(draw.integers(2, 17)))
        training = bool(draw.random() < 0.5)
        cases.append(pytest.param(shape, training, int(draw.integers(2 ** 31)),
                                  id=f"{'x'.join(map(str, shape))}-{'train' if training else 'eval'}"))
    return cases


@pytest.mark.parametrize("n, c_in, c_out, size, kernel, stride, padding, seed", random_conv_cases(50, 101))
def test_conv2d_gradients(n, c_in, c_out, size, kernel, stride, padding, seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        x = Tensor(rng.standard_normal((n, c_in, size, size)), requires_grad=True)
        w = Tensor(rng.standard_normal((c_out, c_in, kernel, kernel)), requires_grad=True)
        out_size = conv_output_size(size, kernel, stride, padding)
        target = Tensor(rng.standard_normal((n, c_out, out_size, out_size)))

        def loss(_):
            return (conv2d(x, w, stride=stride, padding=padding) * target).sum()

        backward(loss(None))
        assert relative_error(x.grad, finite_difference_grad(loss, x).data) < 1e-6
        assert relative_error(w.grad, finite_difference_grad(loss, w).data) < 1e-6


@pytest.mark.parametrize("n, c_in, c_out, size, kernel, stride, padding, seed", random_conv_cases(50, 202))
def test_conv_transpose2d_gradients(n, c_in, c_out, size, kernel, stride, padding, seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        y = Tensor(rng.standard_normal((n, c_in, size, size)), requires_grad=True)
        w = Tensor(rng.standard_normal((c_in, c_out, kernel, kernel)) / kernel, requires_grad=True)
        out_size = conv_transpose_output_size(size, kernel, stride, padding)
        target = Tensor(rng.standard_normal((n, c_out, out_size, out_size)))

        def loss(_):
            return (conv_transpose2d(y, w, stride=stride, padding=padding).tanh() * target).sum()

        backward(loss(None))
        assert relative_error(y.grad, finite_difference_grad(loss, y).data) < 1e-6
        assert relative_error(w.grad, finite_difference_grad(loss, w).data) < 1e-6


def test_conv_shape_errors(rng):
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(rng.standard_normal((3, 1, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(rng.standard_normal((3, 2, 7, 7))))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(rng.standard_normal((3, 2, 3, 3))), stride=0)
    with pytest.raises(ShapeError):
        conv_transpose2d(x, Tensor(rng.standard_normal((3, 2, 3, 3))))
    with pytest.raises(ShapeError):
        conv_transpose2d(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones((2, 1, 1, 1))), padding=1)


def test_batchnorm_train_normalizes_per_channel(rng):
    with precision(np.float64):
        x = rng.normal(3.0, 2.0, size=(8, 3, 5, 5))
        gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
        out = batchnorm(Tensor(x), gamma, beta, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_batchnorm_running_statistics(rng):
    with precision(np.float64):
        x = rng.normal(1.0, 3.0, size=(16, 2))
        state = BatchNormState.create(2, dtype=np.float64)
        batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), training=True, running_stats=state)
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))
        assert state.num_batches == 1


def test_batchnorm_eval_uses_running_statistics(rng):
    with precision(np.float64):
        state = BatchNormState.create(2, dtype=np.float64)
        state.running_mean = np.array([1.0, -1.0])
        state.running_var = np.array([4.0, 0.25])
        x = rng.standard_normal((1, 2, 3, 3))
        out = batchnorm(Tensor(x), Tensor(np.array([2.0, 1.0])), Tensor(np.array([0.5, 0.0])),
                        training=False, running_stats=state).data
        expected_0 = 2.0 * (x[:, 0] - 1.0) / np.sqrt(4.0 + 1e-5) + 0.5
        expected_1 = (x[:, 1] + 1.0) / np.sqrt(0.25 + 1e-5)
        np.testing.assert_allclose(out[:, 0], expected_0)
        np.testing.assert_allclose(out[:, 1], expected_1)
        assert state.num_batches == 0


def test_batchnorm_train_needs_two_samples():
    with pytest.raises(ShapeError):
        batchnorm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), training=True)


@pytest.mark.parametrize("shape, training, seed", random_batchnorm_cases(50, 303))
def test_batchnorm_gradients(shape, training, seed):
    rng = np.random.default_rng(seed)
    channels = shape[1]
    with precision(np.float64):
        x = Tensor(rng.normal(0.5, 2.0, size=shape), requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=channels), requires_grad=True)
        beta = Tensor(rng.standard_normal(channels), requires_grad=True)
        state = BatchNormState.create(channels, dtype=np.float64)
        state.running_mean = rng.standard_normal(channels)
        state.running_var = rng.uniform(0.5, 2.0, size=channels)
        target = Tensor(rng.standard_normal(shape))

        def loss(_):
            return (batchnorm(x, gamma, beta, training=training, running_stats=state) * target).sum()

        backward(loss(None))
        for tensor in (x, gamma, beta):
            assert relative_error(tensor.grad, finite_difference_grad(loss, tensor).data) < 1e-5
