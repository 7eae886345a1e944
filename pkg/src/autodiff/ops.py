"""Differentiable operations over :class:`~src.autodiff.tensor.Tensor`.

Each op computes its forward result with numpy and hands a backward closure
to :func:`make_output`; the closure returns one gradient (or ``None``) per
input, already reduced to that input's shape.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.autodiff.tensor import ArrayLike, Tensor, as_tensor, make_output
from src.errors import ShapeError

Axis = Optional[Union[int, Tuple[int, ...]]]

ELEMENTWISE_KINDS = ("relu", "sigmoid", "leaky_relu", "tanh")
POOL_KINDS = ("max", "avg", "global_avg")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op} operands do not broadcast", a.shape, b.shape) from None


# --- arithmetic ---------------------------------------------------------------


def add(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)

    def backward(grad: np.ndarray):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return make_output("add", a.data + b.data, (a, b), backward)


def sub(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)

    def backward(grad: np.ndarray):
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return make_output("sub", a.data - b.data, (a, b), backward)


def mul(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)

    def backward(grad: np.ndarray):
        grad_a = _unbroadcast(grad * b.data, a.shape) if a.requires_grad else None
        grad_b = _unbroadcast(grad * a.data, b.shape) if b.requires_grad else None
        return grad_a, grad_b

    return make_output("mul", a.data * b.data, (a, b), backward)


def div(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    out = a.data / b.data

    def backward(grad: np.ndarray):
        grad_a = _unbroadcast(grad / b.data, a.shape) if a.requires_grad else None
        grad_b = _unbroadcast(-grad * out / b.data, b.shape) if b.requires_grad else None
        return grad_a, grad_b

    return make_output("div", out, (a, b), backward)


def absolute(x: Tensor) -> Tensor:
    def backward(grad: np.ndarray):
        return (grad * np.sign(x.data),)

    return make_output("abs", np.abs(x.data), (x,), backward)


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; values below ``floor`` are read as ``floor``."""

    safe = np.maximum(x.data, floor) if floor > 0 else x.data

    def backward(grad: np.ndarray):
        return (grad / safe,)

    return make_output("log", np.log(safe), (x,), backward)


# --- reductions and reshaping ---------------------------------------------------


def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axis: Axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            grad = np.expand_dims(grad, a)
    return np.broadcast_to(grad, shape)


def reduce_sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    def backward(grad: np.ndarray):
        return (np.array(_expand_reduced(grad, x.shape, axis, keepdims)),)

    return make_output("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def reduce_mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.asarray(out).size, 1)

    def backward(grad: np.ndarray):
        return (np.array(_expand_reduced(grad, x.shape, axis, keepdims)) / count,)

    return make_output("mean", out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("cannot reshape", x.shape, tuple(shape)) from None

    def backward(grad: np.ndarray):
        return (grad.reshape(x.shape),)

    return make_output("reshape", out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat operands disagree", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(grad: np.ndarray):
        return tuple(np.split(grad, bounds, axis=axis))

    return make_output("concat", out, tensors, backward)


def take(x: Tensor, indices: Sequence[int], axis: int = 1) -> Tensor:
    """Select ``indices`` along ``axis`` in the order given."""

    index = np.asarray(indices, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[axis]):
        raise ShapeError(f"take indices {index.tolist()} out of range for axis {axis}", x.shape)

    def backward(grad: np.ndarray):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(grad, axis, 0))
        return (full,)

    return make_output("take", np.take(x.data, index, axis=axis), (x,), backward)


# --- activations ----------------------------------------------------------------


def _sigmoid(values: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(values))
    return np.where(values >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(values.dtype)


def elementwise(kind: str, x: Tensor, slope: float = 0.2) -> Tensor:
    """Apply ``relu``, ``sigmoid``, ``leaky_relu`` or ``tanh`` per element."""

    if kind == "relu":
        out = np.maximum(x.data, 0)
        local = (x.data > 0).astype(x.data.dtype)
    elif kind == "leaky_relu":
        out = np.where(x.data > 0, x.data, slope * x.data).astype(x.data.dtype)
        local = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    elif kind == "sigmoid":
        out = _sigmoid(x.data)
        local = out * (1 - out)
    elif kind == "tanh":
        out = np.tanh(x.data)
        local = 1 - out * out
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}; expected one of {ELEMENTWISE_KINDS}")

    def backward(grad: np.ndarray):
        return (grad * local,)

    return make_output(kind, out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    return elementwise("relu", x)


def sigmoid(x: Tensor) -> Tensor:
    return elementwise("sigmoid", x)


def tanh(x: Tensor) -> Tensor:
    return elementwise("tanh", x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return elementwise("leaky_relu", x, slope=slope)


# --- convolution and friends -------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` [N,C,H,W] with ``kernel`` [K,C,kh,kw]."""

    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError("conv2d input and kernel disagree", x.shape, kernel.shape)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, w = x.shape
    k, _, kh, kw = kernel.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError("conv2d kernel larger than padded input", x.shape, kernel.shape)

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def backward(grad: np.ndarray):
        grad_x = grad_k = None
        if kernel.requires_grad:
            grad_k = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            grad_padded = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    contribution = np.tensordot(grad, kernel.data[:, :, i, j], axes=([1], [0]))
                    grad_padded[
                        :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
                    ] += contribution.transpose(0, 3, 1, 2)
            grad_x = grad_padded[:, :, padding : padding + h, padding : padding + w] if padding else grad_padded
        return grad_x, grad_k

    return make_output("conv2d", out, (x, kernel), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ShapeError("upsample expects [N,C,H,W]", x.shape)
    if factor == 1:
        return x
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def backward(grad: np.ndarray):
        return (grad.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_output("upsample", out, (x,), backward)


def upsample_conv(x: Tensor, kernel: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsample by ``factor`` then a size-preserving conv."""

    kh, kw = kernel.shape[2], kernel.shape[3]
    if kh % 2 == 0 or kw != kh:
        raise ShapeError("upsample_conv needs a square odd kernel", kernel.shape)
    return conv2d(upsample_nearest(x, factor), kernel, stride=1, padding=(kh - 1) // 2)


def pool(kind: str, x: Tensor, window: int = 2) -> Tensor:
    if kind not in POOL_KINDS:
        raise ValueError(f"unknown pool kind {kind!r}; expected one of {POOL_KINDS}")
    if x.ndim != 4:
        raise ShapeError("pool expects [N,C,H,W]", x.shape)
    n, c, h, w = x.shape
    if kind == "global_avg":
        return reduce_mean(x, axis=(2, 3), keepdims=True)
    if window < 1 or h % window or w % window:
        raise ShapeError(f"pool window {window} does not divide the spatial size", x.shape)
    oh, ow = h // window, w // window
    tiles = x.data.reshape(n, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, -1)

    if kind == "avg":
        out = tiles.mean(axis=-1)

        def backward(grad: np.ndarray):
            spread = np.broadcast_to(grad[..., None, None] / (window * window), (n, c, oh, ow, window, window))
            return (spread.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

        return make_output("avg_pool", out, (x,), backward)

    winners = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, winners[..., None], axis=-1)[..., 0]

    def backward(grad: np.ndarray):
        routed = np.zeros_like(tiles)
        np.put_along_axis(routed, winners[..., None], grad[..., None], axis=-1)
        routed = routed.reshape(n, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(n, c, h, w),)

    return make_output("max_pool", out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    return pool("global_avg", x)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` [N,D], ``weight`` [D,E]."""

    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError("dense input and weight disagree", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError("dense bias does not match weight", bias.shape, weight.shape)
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(grad: np.ndarray):
        grad_x = grad @ weight.data.T if x.requires_grad else None
        grad_w = x.data.T @ grad if weight.requires_grad else None
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, grad.sum(axis=0)

    return make_output("dense", out, inputs, backward)


# --- fused loss kernel ---------------------------------------------------------------

BCE_EPS = 1e-7


def binary_cross_entropy(prediction: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean per-element BCE of ``prediction`` against a constant ``target``.

    Probabilities are clamped to [1e-7, 1-1e-7] inside the log; the gradient
    is taken at the clamped value so saturated float32 sigmoids still train.
    """

    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=prediction.data.dtype)
    if target_data.shape != prediction.shape:
        raise ShapeError("binary_cross_entropy prediction and target disagree", prediction.shape, target_data.shape)
    if not np.all(np.isfinite(prediction.data)) or prediction.data.min(initial=0.0) < 0 or prediction.data.max(initial=0.0) > 1:
        raise ValueError("binary_cross_entropy expects probabilities within [0, 1]")
    if target_data.min(initial=0.0) < 0 or target_data.max(initial=0.0) > 1:
        raise ValueError("binary_cross_entropy expects targets within [0, 1]")
    p = np.clip(prediction.data, BCE_EPS, 1 - BCE_EPS)
    t = target_data.astype(p.dtype)
    loss = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    count = p.size

    def backward(grad: np.ndarray):
        return (grad * (p - t) / (p * (1 - p)) / count,)

    return make_output("bce", np.asarray(loss, dtype=p.dtype), (prediction,), backward)
