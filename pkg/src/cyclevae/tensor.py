"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the cycle-consistent VAE needs are provided. Arrays are
row-major numpy arrays and images follow the NCHW convention.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numba
import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def _check_finite(array: np.ndarray, where: str) -> None:
    if not np.isfinite(array).all():
        raise FloatingPointError(f"non-finite values produced by {where}")


class Tensor:
    """An array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        _check_finite(array, "tensor construction")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._ctx: Context | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def abs(self):
        return tabs(self)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class Context:
    """Per-node record: inputs, the function that produced the node, saved values."""

    __slots__ = ("fn", "inputs", "saved", "kwargs")

    def __init__(self, fn: type[Function], inputs: tuple[Tensor, ...], kwargs: dict):
        self.fn = fn
        self.inputs = inputs
        self.saved: tuple = ()
        self.kwargs = kwargs

    def save(self, *values) -> None:
        self.saved = values


class Function:
    """Base class for differentiable operations.

    Subclasses define ``forward(ctx, *arrays, **kwargs)`` returning an array and
    ``backward(ctx, grad)`` returning one gradient (or None) per input.
    """

    name = "function"

    @staticmethod
    def forward(ctx: Context, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        ctx = Context(cls, tensors, kwargs)
        out = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        _check_finite(out, cls.name)
        result = Tensor.__new__(Tensor)
        result.data = out
        result.grad = None
        result._ctx = None
        result.requires_grad = False
        if is_grad_enabled() and any(t.requires_grad for t in tensors):
            result.requires_grad = True
            result._ctx = ctx
        return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx.saved
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class Neg(Function):
    name = "neg"

    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, grad):
        return (-grad,)


class Exp(Function):
    name = "exp"

    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved
        return (grad * out,)


class Abs(Function):
    name = "abs"

    @staticmethod
    def forward(ctx, a):
        ctx.save(np.sign(a))
        return np.abs(a)

    @staticmethod
    def backward(ctx, grad):
        (sign,) = ctx.saved
        return (grad * sign,)


class ReLU(Function):
    name = "relu"

    @staticmethod
    def forward(ctx, a):
        ctx.save(a > 0)
        return np.maximum(a, 0)

    @staticmethod
    def backward(ctx, grad):
        (mask,) = ctx.saved
        return (grad * mask,)


class Sigmoid(Function):
    name = "sigmoid"

    @staticmethod
    def forward(ctx, a):
        out = 0.5 * (1.0 + np.tanh(0.5 * a))
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved
        return (grad * out * (1.0 - out),)


# ---------------------------------------------------------------- reductions / shape


class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(ctx, a, axis=None):
        ctx.save(a.shape)
        return np.asarray(a.sum(axis=axis))

    @staticmethod
    def backward(ctx, grad):
        (shape,) = ctx.saved
        axis = ctx.kwargs.get("axis")
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, a, shape=()):
        ctx.save(a.shape)
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        (shape,) = ctx.saved
        return (grad.reshape(shape),)


class Concat(Function):
    name = "concat"

    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ctx.save([a.shape[axis] for a in arrays])
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        (sizes,) = ctx.saved
        axis = ctx.kwargs.get("axis", 0)
        return tuple(np.split(grad, np.cumsum(sizes)[:-1], axis=axis))


# ---------------------------------------------------------------- layers


class Linear(Function):
    name = "linear"

    @staticmethod
    def forward(ctx, x, weight, bias):
        ctx.save(x, weight)
        return x @ weight.T + bias

    @staticmethod
    def backward(ctx, grad):
        x, weight = ctx.saved
        return grad @ weight, grad.T @ x, grad.sum(axis=0)


# Convolutions work on channels-last memory: NCHW arrays are handled as
# transposed views of NHWC buffers so patch gathers and scatters stay contiguous.


def _im2col(x: np.ndarray, k: int, stride: int, padding: int, out_h: int, out_w: int) -> np.ndarray:
    """Patches of NCHW ``x`` as rows of shape (batch*out_h*out_w, k*k*channels)."""
    xh = x.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    batch, channels = xh.shape[0], xh.shape[3]
    windows = np.lib.stride_tricks.sliding_window_view(xh, (k, k), axis=(1, 2))
    windows = windows[:, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(batch * out_h * out_w, k * k * channels)


@numba.njit(cache=True)
def _scatter_patches(patches, image, stride):
    batch, out_h, out_w, k, _, channels = patches.shape
    for b in range(batch):
        for r in range(out_h):
            for q in range(out_w):
                for i in range(k):
                    row = r * stride + i
                    for j in range(k):
                        col = q * stride + j
                        for c in range(channels):
                            image[b, row, col, c] += patches[b, r, q, i, j, c]


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int, padding: int,
            out_h: int, out_w: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patch rows into an NCHW image of ``shape``."""
    batch, channels, height, width = shape
    patches = np.ascontiguousarray(cols).reshape(batch, out_h, out_w, k, k, channels)
    image = np.zeros((batch, height + 2 * padding, width + 2 * padding, channels), dtype=cols.dtype)
    _scatter_patches(patches, image, stride)
    image = image[:, padding : padding + height, padding : padding + width]
    return image.transpose(0, 3, 1, 2)


def _kernel_matrix(weight: np.ndarray) -> np.ndarray:
    """(out, in, k, k) -> (out, k*k*in), matching the ``_im2col`` column order."""
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def _kernel_from_matrix(matrix: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    out_c, in_c, k, _ = shape
    return np.ascontiguousarray(matrix.reshape(out_c, k, k, in_c).transpose(0, 3, 1, 2))


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _conv_forward(x, weight, stride, padding):
    batch, _, height, width = x.shape
    out_c, _, k, _ = weight.shape
    out_h = _conv_out_size(height, k, stride, padding)
    out_w = _conv_out_size(width, k, stride, padding)
    cols = _im2col(x, k, stride, padding, out_h, out_w)
    out = cols @ _kernel_matrix(weight).T
    return out.reshape(batch, out_h, out_w, out_c).transpose(0, 3, 1, 2), cols


def _conv_input_grad(grad_rows, weight, x_shape, stride, padding, out_h, out_w):
    k = weight.shape[2]
    return _col2im(grad_rows @ _kernel_matrix(weight), x_shape, k, stride, padding, out_h, out_w)


def _rows(a: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C)."""
    return a.transpose(0, 2, 3, 1).reshape(-1, a.shape[1])


class Conv2d(Function):
    name = "conv2d"

    @staticmethod
    def forward(ctx, x, weight, bias=None, stride=1, padding=0):
        out, cols = _conv_forward(x, weight, stride, padding)
        ctx.save(cols, weight, x.shape, out.shape[2:])
        if bias is not None:
            out = out + bias[None, :, None, None]
        return out

    @staticmethod
    def backward(ctx, grad):
        cols, weight, x_shape, (out_h, out_w) = ctx.saved
        stride, padding = ctx.kwargs["stride"], ctx.kwargs["padding"]
        g = _rows(grad)
        grad_w = _kernel_from_matrix(g.T @ cols, weight.shape)
        grad_x = _conv_input_grad(g, weight, x_shape, stride, padding, out_h, out_w)
        if len(ctx.inputs) == 3:
            return grad_x, grad_w, grad.sum(axis=(0, 2, 3))
        return grad_x, grad_w


class Conv2dTranspose(Function):
    name = "conv2d_transpose"

    @staticmethod
    def forward(ctx, x, weight, bias=None, stride=1, padding=0, output_padding=0):
        batch, _, height, width = x.shape
        _, out_c, k, _ = weight.shape
        out_h = (height - 1) * stride - 2 * padding + k + output_padding
        out_w = (width - 1) * stride - 2 * padding + k + output_padding
        rows = _rows(x)
        out = _conv_input_grad(rows, weight, (batch, out_c, out_h, out_w), stride, padding, height, width)
        ctx.save(rows, weight)
        if bias is not None:
            out = out + bias[None, :, None, None]
        return out

    @staticmethod
    def backward(ctx, grad):
        rows, weight = ctx.saved
        stride, padding = ctx.kwargs["stride"], ctx.kwargs["padding"]
        grad_x, cols = _conv_forward(grad, weight, stride, padding)
        grad_w = _kernel_from_matrix(rows.T @ cols, weight.shape)
        if len(ctx.inputs) == 3:
            return grad_x, grad_w, grad.sum(axis=(0, 2, 3))
        return grad_x, grad_w


class InstanceNorm(Function):
    name = "instance_norm"

    @staticmethod
    def forward(ctx, x, eps=1e-5):
        mean_ = x.mean(axis=(2, 3), keepdims=True)
        centered = x - mean_
        var = (centered * centered).mean(axis=(2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        out = centered * inv_std
        ctx.save(out, inv_std)
        return out

    @staticmethod
    def backward(ctx, grad):
        out, inv_std = ctx.saved
        n = out.shape[2] * out.shape[3]
        g_sum = grad.sum(axis=(2, 3), keepdims=True)
        gx_sum = (grad * out).sum(axis=(2, 3), keepdims=True)
        return (inv_std * (grad - g_sum / n - out * gx_sum / n),)


class CrossEntropy(Function):
    """Mean softmax cross-entropy of integer ``labels`` under ``logits``."""

    name = "cross_entropy"

    @staticmethod
    def forward(ctx, logits, labels):
        idx = labels.astype(np.int64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        ctx.save(np.exp(log_p), idx)
        return np.asarray(-log_p[np.arange(len(idx)), idx].mean())

    @staticmethod
    def backward(ctx, grad):
        probs, idx = ctx.saved
        g = probs.copy()
        g[np.arange(len(idx)), idx] -= 1.0
        return g * (grad / len(idx)), None


# ---------------------------------------------------------------- functional API


def add(a, b) -> Tensor:
    a = as_tensor(a)
    return Add.apply(a, as_tensor(b, a.dtype))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    return Mul.apply(a, as_tensor(b, a.dtype))


def neg(a) -> Tensor:
    return Neg.apply(a)


def exp(a) -> Tensor:
    return Exp.apply(a)


def tabs(a) -> Tensor:
    return Abs.apply(a)


def relu(a) -> Tensor:
    return ReLU.apply(a)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


def tsum(a, axis=None) -> Tensor:
    return Sum.apply(a, axis=axis)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    if int(np.prod(shape)) != a.size and -1 not in shape:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}")
    return Reshape.apply(a, shape=tuple(shape))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def linear(x, weight, bias) -> Tensor:
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or bias.shape != (weight.shape[0],) or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return Linear.apply(x, weight, bias)


def conv2d(x, kernel, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[1] != x.shape[1] or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride {stride}, padding {padding}")
    k = kernel.shape[2]
    if k > x.shape[2] + 2 * padding or k > x.shape[3] + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {x.shape[2:]} (padding {padding})")
    inputs = (x, kernel) if bias is None else (x, kernel, as_tensor(bias))
    if bias is not None and inputs[2].shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d: bias {inputs[2].shape} for {kernel.shape[0]} output channels")
    return Conv2d.apply(*inputs, stride=stride, padding=padding)


def conv2d_transpose(x, kernel, stride: int = 1, padding: int = 0, output_padding: int = 0,
                     bias=None) -> Tensor:
    """Transposed convolution; ``kernel`` has shape (in_channels, out_channels, k, k)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[0] != x.shape[1] or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d_transpose: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or padding < 0 or output_padding not in (0, 1) or output_padding >= stride:
        raise ShapeError(f"conv2d_transpose: stride {stride}, padding {padding}, output_padding {output_padding}")
    k = kernel.shape[2]
    out_h = (x.shape[2] - 1) * stride - 2 * padding + k + output_padding
    out_w = (x.shape[3] - 1) * stride - 2 * padding + k + output_padding
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d_transpose: computed output size {(out_h, out_w)} is not positive")
    inputs = (x, kernel) if bias is None else (x, kernel, as_tensor(bias))
    if bias is not None and inputs[2].shape != (kernel.shape[1],):
        raise ShapeError(f"conv2d_transpose: bias {inputs[2].shape} for {kernel.shape[1]} output channels")
    return Conv2dTranspose.apply(*inputs, stride=stride, padding=padding, output_padding=output_padding)


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] * x.shape[3] < 1:
        raise ShapeError(f"instance_norm: expected (batch, c, h, w), got {x.shape}")
    if eps <= 0:
        raise ValueError("instance_norm: eps must be positive")
    return InstanceNorm.apply(x, eps=eps)


def cross_entropy(logits, labels) -> Tensor:
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    return CrossEntropy.apply(logits, Tensor(labels.astype(np.float64)))


# ---------------------------------------------------------------- backward


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf ``t`` that requires grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        ctx = node._ctx
        if ctx is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        input_grads = ctx.fn.backward(ctx, grad)
        for parent, g in zip(ctx.inputs, input_grads):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = g if key not in grads else grads[key] + g


def grad_check(function: Callable[[Tensor], Tensor], point, eps: float = 1e-6) -> float:
    """Max component-wise relative error between backward and central differences.

    The relative error of a component is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"grad_check eps must lie in [1e-6, 1e-3], got {eps}")
    base = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = function(x)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    analytic = np.zeros_like(base) if x.grad is None else x.grad

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    probe = base.copy()
    probe_flat = probe.reshape(-1)
    with no_grad():
        for i in range(probe_flat.size):
            orig = probe_flat[i]
            probe_flat[i] = orig + eps
            f_plus = function(Tensor(probe)).item()
            probe_flat[i] = orig - eps
            f_minus = function(Tensor(probe)).item()
            probe_flat[i] = orig
            flat[i] = (f_plus - f_minus) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
