"""
Module providing the network building blocks.

A Module owns Parameters (leaf tensors that require gradients) and child
Modules as plain attributes; parameters, buffers and state dicts are
discovered by walking the attributes in definition order.
"""

from collections import OrderedDict
from typing import Dict, Iterator, List, Tuple

import numpy as np

from src.latent_domain_transfer.conv import BatchNormState, batchnorm, conv2d, conv_transpose2d
from src.latent_domain_transfer.exceptions import ShapeError
from src.latent_domain_transfer.tensor import Tensor, default_dtype


class Parameter(Tensor):
    """A leaf tensor that is trained."""

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)


class Module:
    """
    Base class for every network in the package.
    """

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError(f"{type(self).__name__} does not implement forward")

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{index}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, child in self.named_children():
            yield from child.named_buffers(prefix=f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool = True) -> "Module":
        for param in self.parameters():
            param.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters and buffers by dotted name, as copies."""
        state = OrderedDict()
        for name, param in self.named_parameters():
            state[name] = np.array(param.data, copy=True)
        for name, buffer in self.named_buffers():
            state[name] = np.array(buffer, copy=True)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Copy values from ``state`` into this module.

        Raises:
            ShapeError: If a name is missing, unexpected, or has another shape.
        """
        own = self.state_dict()
        missing = [name for name in own if name not in state]
        unexpected = [name for name in state if name not in own]
        if missing or unexpected:
            raise ShapeError(f"State mismatch: missing={missing}, unexpected={unexpected}")
        for name, value in own.items():
            if np.shape(state[name]) != value.shape:
                raise ShapeError(f"{name}: expected shape {value.shape}, got {np.shape(state[name])}")
        for name, param in self.named_parameters():
            param.data = np.array(state[name], dtype=param.dtype)
            param.grad = None
        self._load_buffers(state, prefix="")

    def _load_buffers(self, state: Dict[str, np.ndarray], prefix: str) -> None:
        for name, child in self.named_children():
            child._load_buffers(state, prefix=f"{prefix}{name}.")


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Linear(Module):
    """Fully connected layer ``x @ weight + bias``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 zero_init: bool = False):
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            weight = np.zeros((in_features, out_features))
        else:
            weight = _he_normal(rng, (in_features, out_features), in_features)
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Linear expects (batch, {self.in_features}), got {x.shape}")
        return x @ self.weight + self.bias


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int,
                 padding: int, rng: np.random.Generator):
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return out + self.bias.reshape(1, -1, 1, 1)


class ConvTranspose2d(Module):
    """Transposed convolution; the weight is laid out (in, out, K, K)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int,
                 padding: int, rng: np.random.Generator):
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size // max(stride * stride, 1)
        self.weight = Parameter(_he_normal(rng, (in_channels, out_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        out = conv_transpose2d(x, self.weight, stride=self.stride, padding=self.padding)
        return out + self.bias.reshape(1, -1, 1, 1)


class BatchNorm(Module):
    """Per-channel batch normalization for (N, C) or (N, C, H, W) input."""

    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.stats = BatchNormState.create(channels, dtype=default_dtype())

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, training=self.training, running_stats=self.stats)

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        yield prefix + "running_mean", self.stats.running_mean
        yield prefix + "running_var", self.stats.running_var

    def _load_buffers(self, state: Dict[str, np.ndarray], prefix: str) -> None:
        self.stats.running_mean = np.array(state[prefix + "running_mean"], dtype=self.stats.running_mean.dtype)
        self.stats.running_var = np.array(state[prefix + "running_var"], dtype=self.stats.running_var.dtype)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)
