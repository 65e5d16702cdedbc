"""
Module providing the dense tensor core with reverse-mode differentiation.

A Tensor wraps a numpy array. Every primitive applied to tensors that require
gradients is recorded, in execution order, on the current thread's Graph.
backward() walks that record in reverse, accumulates gradients into the leaf
tensors and clears the record.
"""

import contextlib
import logging
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Type, Union

import numpy as np

from src.latent_domain_transfer.exceptions import GraphError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Graph:
    """
    Ordered record of the primitives executed since the last backward pass.
    """

    def __init__(self):
        self.nodes: List["Primitive"] = []

    def record(self, op: "Primitive") -> None:
        self.nodes.append(op)

    def clear(self) -> None:
        """Drop every recorded op and detach their outputs from the record."""
        for op in self.nodes:
            if op.output is not None:
                op.output._op = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


class _ThreadState(threading.local):
    def __init__(self):
        self.graph = Graph()
        self.grad_enabled = True
        self.dtype = np.float32


_state = _ThreadState()


def current_graph() -> Graph:
    return _state.graph


def default_dtype() -> np.dtype:
    return np.dtype(_state.dtype)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """
    Set the dtype new tensors are created with inside the block.

    Training runs in float32; gradient checks use ``precision(np.float64)``.
    """
    previous = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


class Tensor:
    """
    Dense n-dimensional array that can take part in a differentiation graph.

    Attributes:
        data: The values, a numpy array in row-major order.
        requires_grad: Whether gradients flow to this tensor.
        grad: Gradient buffer of the same shape as data, filled by backward().
    """

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._op: Optional["Primitive"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return apply_primitive("add", [self, other])

    def __radd__(self, other):
        return apply_primitive("add", [other, self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, other])

    def __rsub__(self, other):
        return apply_primitive("sub", [other, self])

    def __mul__(self, other):
        return apply_primitive("mul", [self, other])

    def __rmul__(self, other):
        return apply_primitive("mul", [other, self])

    def __neg__(self):
        return apply_primitive("mul", [self, -1.0])

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a scalar")
        return apply_primitive("mul", [self, 1.0 / other])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def relu(self) -> "Tensor":
        return apply_primitive("relu", [self])

    def tanh(self) -> "Tensor":
        return apply_primitive("tanh", [self])

    def sigmoid(self) -> "Tensor":
        return apply_primitive("sigmoid", [self])

    def log(self) -> "Tensor":
        return apply_primitive("log", [self])

    def exp(self) -> "Tensor":
        return apply_primitive("exp", [self])

    def square(self) -> "Tensor":
        return apply_primitive("square", [self])

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return apply_primitive("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return apply_primitive("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], shape=shape)

    def clip(self, low: float, high: float) -> "Tensor":
        return apply_primitive("clip", [self], low=low, high=high)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        return apply_primitive("log_softmax", [self], axis=axis)


def as_tensor(value: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    """Wrap a constant into a Tensor, matching ``like``'s dtype when given."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, requires_grad=False, dtype=dtype)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return apply_primitive("concat", list(tensors), axis=axis)


class Primitive:
    """
    One differentiable operation.

    Subclasses implement forward() on numpy arrays, keeping whatever they
    need for backward() on the instance, and backward(), which maps the
    gradient of the output to one gradient (or None) per input.
    """

    kind: str = ""

    def __init__(self, **attrs):
        self.attrs = attrs
        self.inputs: Tuple[Tensor, ...] = ()
        self.output: Optional[Tensor] = None

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"forward not implemented for {self.kind}")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"backward not implemented for {self.kind}")


PRIMITIVES: Dict[str, Type[Primitive]] = {}


def register_primitive(cls: Type[Primitive]) -> Type[Primitive]:
    PRIMITIVES[cls.kind] = cls
    return cls


def apply_primitive(kind: str, inputs: Sequence[Union[Tensor, ArrayLike]], **attrs) -> Tensor:
    """
    Run a registered primitive and record it when any input requires gradients.

    Args:
        kind: Registered primitive name (add, matmul, conv2d, ...).
        inputs: Operand tensors; plain numbers and arrays become constants.
        **attrs: Primitive attributes such as axis, stride or padding.

    Returns:
        The output tensor.

    Raises:
        ShapeError: If operand shapes do not fit the primitive.
        NumericalError: If the output holds NaN or Inf.
    """
    try:
        cls = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"Unknown primitive: {kind}") from None

    reference = next((value for value in inputs if isinstance(value, Tensor)), None)
    tensors = tuple(as_tensor(value, like=reference) for value in inputs)

    op = cls(**attrs)
    out_data = op.forward(*(tensor.data for tensor in tensors))
    if not np.all(np.isfinite(out_data)):
        raise NumericalError(f"Non-finite output from {kind}")

    record = _state.grad_enabled and any(tensor.requires_grad for tensor in tensors)
    out = Tensor(out_data, requires_grad=record, dtype=out_data.dtype)
    if record:
        op.inputs = tensors
        op.output = out
        out._op = op
        _state.graph.record(op)
    return out


def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` of every leaf tensor reachable from a scalar loss.

    Gradients accumulate into existing buffers. The recorded graph is
    consumed and cleared.

    Raises:
        ShapeError: If the loss is not a scalar.
        GraphError: If nothing was recorded for the loss.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = _state.graph
    if loss._op is None or not graph.nodes:
        raise GraphError("backward called without a recorded graph")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(graph.nodes):
        grad = grads.pop(id(op.output), None)
        if grad is None:
            continue
        for tensor, input_grad in zip(op.inputs, op.backward(grad)):
            if input_grad is None or not tensor.requires_grad:
                continue
            if tensor._op is None:
                input_grad = input_grad.astype(tensor.dtype, copy=False)
                tensor.grad = input_grad.copy() if tensor.grad is None else tensor.grad + input_grad
            else:
                key = id(tensor)
                grads[key] = grads[key] + input_grad if key in grads else input_grad
    graph.clear()


def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """
    Central-difference estimate of the gradient of a scalar function.

    Each coordinate i gets (f(x + h e_i) - f(x - h e_i)) / 2h. ``x`` is
    perturbed in place and restored before returning.
    """
    if h <= 0:
        raise ValueError(f"Step h must be positive, got {h}")

    original = x.data
    work = np.array(original, copy=True)
    grad = np.zeros_like(work)
    x.data = work
    try:
        with no_grad():
            for index in np.ndindex(work.shape):
                saved = work[index]
                work[index] = saved + h
                plus = float(f(x).item())
                work[index] = saved - h
                minus = float(f(x).item())
                work[index] = saved
                grad[index] = (plus - minus) / (2.0 * h)
    finally:
        x.data = original
    return Tensor(grad, dtype=grad.dtype)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # Sum out the axes numpy broadcasting added or stretched.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(*shapes: Tuple[int, ...]) -> None:
    try:
        np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"Incompatible shapes {shapes}") from None


def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        grad = np.expand_dims(grad, tuple(a % len(shape) for a in axes))
    return np.broadcast_to(grad, shape)


@register_primitive
class Add(Primitive):
    kind = "add"

    def forward(self, a, b):
        _broadcast_shapes(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


@register_primitive
class Sub(Primitive):
    kind = "sub"

    def forward(self, a, b):
        _broadcast_shapes(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


@register_primitive
class Mul(Primitive):
    kind = "mul"

    def forward(self, a, b):
        _broadcast_shapes(a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


@register_primitive
class MatMul(Primitive):
    kind = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul needs (m, k) @ (k, n), got {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


@register_primitive
class Concat(Primitive):
    kind = "concat"

    def forward(self, *arrays):
        axis = self.attrs.get("axis", -1)
        first = arrays[0]
        axis = axis % first.ndim
        for array in arrays[1:]:
            if array.ndim != first.ndim or any(
                array.shape[d] != first.shape[d] for d in range(first.ndim) if d != axis
            ):
                raise ShapeError(f"concat along axis {axis} got shapes {[a.shape for a in arrays]}")
        self.axis = axis
        self.splits = np.cumsum([array.shape[axis] for array in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


@register_primitive
class Relu(Primitive):
    kind = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


@register_primitive
class Tanh(Primitive):
    kind = "tanh"

    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1 - self.out * self.out),)


@register_primitive
class Sigmoid(Primitive):
    kind = "sigmoid"

    def forward(self, x):
        wide = x.astype(np.float64)
        # exp of a non-positive argument only
        e = np.exp(-np.abs(wide))
        out = np.where(wide >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        # output stays strictly inside (0, 1) in the caller's dtype
        eps = np.finfo(x.dtype).eps
        self.out = np.clip(out, eps, 1.0 - eps).astype(x.dtype)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


@register_primitive
class Log(Primitive):
    kind = "log"

    def forward(self, x):
        if np.any(x <= 0):
            raise NumericalError("log of non-positive value")
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


@register_primitive
class Exp(Primitive):
    kind = "exp"

    def forward(self, x):
        with np.errstate(over="ignore"):
            self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


@register_primitive
class Square(Primitive):
    kind = "square"

    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, grad):
        return (2 * grad * self.x,)


@register_primitive
class Sum(Primitive):
    kind = "sum"

    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(axis=self.attrs.get("axis"), keepdims=self.attrs.get("keepdims", False)))

    def backward(self, grad):
        return (_expand_reduced(grad, self.shape, self.attrs.get("axis"), self.attrs.get("keepdims", False)),)


@register_primitive
class Mean(Primitive):
    kind = "mean"

    def forward(self, x):
        self.shape = x.shape
        out = np.asarray(x.mean(axis=self.attrs.get("axis"), keepdims=self.attrs.get("keepdims", False)))
        self.count = x.size // max(out.size, 1)
        return out

    def backward(self, grad):
        expanded = _expand_reduced(grad, self.shape, self.attrs.get("axis"), self.attrs.get("keepdims", False))
        return (expanded / self.count,)


@register_primitive
class Reshape(Primitive):
    kind = "reshape"

    def forward(self, x):
        self.shape = x.shape
        try:
            return x.reshape(self.attrs["shape"])
        except ValueError:
            raise ShapeError(f"Cannot reshape {x.shape} to {self.attrs['shape']}") from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


@register_primitive
class Clip(Primitive):
    kind = "clip"

    def forward(self, x):
        low, high = self.attrs["low"], self.attrs["high"]
        self.mask = (x >= low) & (x <= high)
        return np.clip(x, low, high)

    def backward(self, grad):
        return (grad * self.mask,)


@register_primitive
class LogSoftmax(Primitive):
    kind = "log_softmax"

    def forward(self, x):
        axis = self.attrs.get("axis", -1)
        shifted = x - x.max(axis=axis, keepdims=True)
        self.out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        return self.out

    def backward(self, grad):
        axis = self.attrs.get("axis", -1)
        return (grad - np.exp(self.out) * grad.sum(axis=axis, keepdims=True),)
