"""
Module for the image primitives: convolution, transposed convolution and
batch normalization.

Convolutions use an im2col view built with numpy's sliding_window_view and a
single tensordot; the input gradient (and hence the transposed convolution)
scatters columns back with one strided add per kernel tap.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.latent_domain_transfer.exceptions import ShapeError
from src.latent_domain_transfer.tensor import Primitive, Tensor, apply_primitive, register_primitive

logger = logging.getLogger(__name__)

BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    # (N, C, Ho, Wo, K, K) view over the padded input
    windows = sliding_window_view(_pad(x, padding), (kernel, kernel), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    out = np.tensordot(_windows(x, w.shape[2], stride, padding), w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(grad: np.ndarray, w: np.ndarray, stride: int, padding: int,
                     height: int, width: int) -> np.ndarray:
    """Adjoint of _conv_forward with respect to its input (col2im)."""
    kernel = w.shape[2]
    out_h, out_w = grad.shape[2], grad.shape[3]
    cols = np.tensordot(grad, w, axes=([1], [0]))  # N, Ho, Wo, C, K, K
    padded = np.zeros(
        (grad.shape[0], w.shape[1], height + 2 * padding, width + 2 * padding), dtype=grad.dtype
    )
    for i in range(kernel):
        for j in range(kernel):
            padded[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return padded[:, :, padding:padding + height, padding:padding + width]


def _conv_weight_grad(grad: np.ndarray, x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    windows = _windows(x, kernel, stride, padding)
    out_h, out_w = grad.shape[2], grad.shape[3]
    windows = windows[:, :, :out_h, :out_w]
    return np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))


@register_primitive
class Conv2d(Primitive):
    kind = "conv2d"

    def forward(self, x, w):
        stride, padding = self.attrs["stride"], self.attrs["padding"]
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d needs NCHW input and OIKK kernel, got {x.shape} and {w.shape}")
        if w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
            raise ShapeError(f"Kernel {w.shape} does not match input channels {x.shape[1]}")
        if stride < 1 or padding < 0:
            raise ShapeError(f"Invalid stride {stride} or padding {padding}")
        if x.shape[2] + 2 * padding < w.shape[2] or x.shape[3] + 2 * padding < w.shape[3]:
            raise ShapeError(f"Kernel {w.shape[2]} larger than padded input {x.shape[2:]} (pad {padding})")
        self.x, self.w = x, w
        return _conv_forward(x, w, stride, padding)

    def backward(self, grad):
        stride, padding = self.attrs["stride"], self.attrs["padding"]
        grad_x = _conv_input_grad(grad, self.w, stride, padding, self.x.shape[2], self.x.shape[3])
        grad_w = _conv_weight_grad(grad, self.x, self.w.shape[2], stride, padding)
        return grad_x, grad_w


@register_primitive
class ConvTranspose2d(Primitive):
    kind = "conv_transpose2d"

    def forward(self, y, w):
        stride, padding = self.attrs["stride"], self.attrs["padding"]
        if y.ndim != 4 or w.ndim != 4 or w.shape[0] != y.shape[1] or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv_transpose2d got input {y.shape} and kernel {w.shape}")
        if stride < 1 or padding < 0:
            raise ShapeError(f"Invalid stride {stride} or padding {padding}")
        height = conv_transpose_output_size(y.shape[2], w.shape[2], stride, padding)
        width = conv_transpose_output_size(y.shape[3], w.shape[3], stride, padding)
        if height <= 0 or width <= 0:
            raise ShapeError(
                f"conv_transpose2d parameters give non-positive output extent ({height}, {width})"
            )
        self.y, self.w = y, w
        return _conv_input_grad(y, w, stride, padding, height, width)

    def backward(self, grad):
        stride, padding = self.attrs["stride"], self.attrs["padding"]
        grad_y = _conv_forward(grad, self.w, stride, padding)
        grad_w = _conv_weight_grad(self.y, grad, self.w.shape[2], stride, padding)
        return grad_y, grad_w


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Cross-correlate an NCHW input with an (out, in, K, K) kernel.

    Output extent per spatial axis is floor((H + 2 * padding - K) / stride) + 1.
    """
    return apply_primitive("conv2d", [x, kernel], stride=stride, padding=padding)


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Linear adjoint of conv2d with the same (out, in, K, K) kernel.

    Maps ``out`` channels back to ``in`` channels; output extent per spatial
    axis is (H - 1) * stride - 2 * padding + K.
    """
    return apply_primitive("conv_transpose2d", [x, kernel], stride=stride, padding=padding)


@dataclass
class BatchNormState:
    """Running statistics of one batchnorm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BATCHNORM_MOMENTUM
    eps: float = BATCHNORM_EPS
    num_batches: int = field(default=0)

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def _channel_axes(x: np.ndarray) -> Tuple[int, ...]:
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise ShapeError(f"batchnorm needs (N, C) or (N, C, H, W) input, got {x.shape}")


def _per_channel(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape((1, -1, 1, 1) if ndim == 4 else (1, -1))


@register_primitive
class BatchNorm(Primitive):
    kind = "batchnorm"

    def forward(self, x, gamma, beta):
        state: BatchNormState = self.attrs["state"]
        training: bool = self.attrs["training"]
        axes = _channel_axes(x)
        if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise ShapeError(f"gamma/beta must have shape ({x.shape[1]},)")
        self.gamma = gamma
        self.axes = axes
        if training:
            if x.shape[0] < 2:
                raise ShapeError("batchnorm in train mode needs a batch of at least 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.size // x.shape[1]
            state.running_mean = (
                (1 - state.momentum) * state.running_mean + state.momentum * mean
            ).astype(state.running_mean.dtype)
            state.running_var = (
                (1 - state.momentum) * state.running_var + state.momentum * var * count / (count - 1)
            ).astype(state.running_var.dtype)
            state.num_batches += 1
        else:
            mean, var = state.running_mean, state.running_var
        self.training = training
        self.inv_std = _per_channel(1.0 / np.sqrt(var + state.eps), x.ndim).astype(x.dtype)
        self.xhat = (x - _per_channel(mean, x.ndim)) * self.inv_std
        return _per_channel(gamma, x.ndim) * self.xhat + _per_channel(beta, x.ndim)

    def backward(self, grad):
        ndim = grad.ndim
        grad_gamma = (grad * self.xhat).sum(axis=self.axes)
        grad_beta = grad.sum(axis=self.axes)
        grad_xhat = grad * _per_channel(self.gamma, ndim)
        if not self.training:
            return grad_xhat * self.inv_std, grad_gamma, grad_beta
        count = grad.size // grad.shape[1]
        grad_x = self.inv_std / count * (
            count * grad_xhat
            - grad_xhat.sum(axis=self.axes, keepdims=True)
            - self.xhat * (grad_xhat * self.xhat).sum(axis=self.axes, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, training: bool,
              running_stats: Optional[BatchNormState] = None) -> Tensor:
    """
    Normalize per channel and apply the affine map gamma * xhat + beta.

    Train mode normalizes by batch statistics and updates ``running_stats``;
    eval mode normalizes by the running statistics.
    """
    if running_stats is None:
        running_stats = BatchNormState.create(x.shape[1], dtype=x.dtype)
    return apply_primitive("batchnorm", [x, gamma, beta], state=running_stats, training=training)
