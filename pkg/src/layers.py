"""Parameterised layers and the module protocol shared by every network."""

from __future__ import annotations

import hashlib
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.autodiff import Tensor, ops
from src.errors import ShapeError

Shape = Tuple[int, ...]


class Module:
    """Anything that owns parameters in a stable, named order.

    Subclasses implement :meth:`named_parameters`; the order it yields is the
    checkpoint contract and must not depend on dict hashing or timing.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        return iter(())

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def parameter_hash(module: Module) -> str:
    """SHA-256 over every parameter name, shape and value."""

    digest = hashlib.sha256()
    for name, param in module.named_parameters():
        digest.update(name.encode("utf-8"))
        digest.update(str(param.shape).encode("utf-8"))
        digest.update(np.ascontiguousarray(param.data).tobytes())
    return digest.hexdigest()


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


class Layer(Module):
    """A single differentiable transform with its own parameters."""

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def output_shape(self, shape: Shape) -> Shape:
        """Per-sample output shape for a per-sample input ``shape``."""

        return shape

    def _own(self) -> Sequence[Tuple[str, Tensor]]:
        return ()

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, param in self._own():
            yield _join(prefix, name), param


def _param(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


class Conv2d(Layer):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.stride = stride
        self.padding = (kernel_size - 1) // 2 if padding is None else padding
        self.weight = _param(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = _param(np.zeros(out_channels))

    def _own(self):
        return (("weight", self.weight), ("bias", self.bias))

    def forward(self, x: Tensor) -> Tensor:
        out = ops.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return ops.add(out, ops.reshape(self.bias, (1, -1, 1, 1)))

    def output_shape(self, shape: Shape) -> Shape:
        k, c, kh, kw = self.weight.shape
        if len(shape) != 3 or shape[0] != c:
            raise ShapeError("conv2d layer cannot accept input", shape, self.weight.shape)
        h = (shape[1] + 2 * self.padding - kh) // self.stride + 1
        w = (shape[2] + 2 * self.padding - kw) // self.stride + 1
        return (k, h, w)


class UpsampleConv(Layer):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        factor: int = 2,
        kernel_size: int = 3,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.factor = factor
        self.weight = _param(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = _param(np.zeros(out_channels))

    def _own(self):
        return (("weight", self.weight), ("bias", self.bias))

    def forward(self, x: Tensor) -> Tensor:
        out = ops.upsample_conv(x, self.weight, self.factor)
        return ops.add(out, ops.reshape(self.bias, (1, -1, 1, 1)))

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 3 or shape[0] != self.weight.shape[1]:
            raise ShapeError("upsample_conv layer cannot accept input", shape, self.weight.shape)
        return (self.weight.shape[0], shape[1] * self.factor, shape[2] * self.factor)


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None) -> None:
        rng = rng or np.random.default_rng(0)
        self.weight = _param(rng.normal(0.0, np.sqrt(1.0 / in_features), (in_features, out_features)))
        self.bias = _param(np.zeros(out_features))

    def _own(self):
        return (("weight", self.weight), ("bias", self.bias))

    def forward(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)

    def output_shape(self, shape: Shape) -> Shape:
        if shape != (self.weight.shape[0],):
            raise ShapeError("dense layer cannot accept input", shape, self.weight.shape)
        return (self.weight.shape[1],)


class Activation(Layer):
    def __init__(self, kind: str, slope: float = 0.2) -> None:
        if kind not in ops.ELEMENTWISE_KINDS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return ops.elementwise(self.kind, x, slope=self.slope)


class Pool(Layer):
    def __init__(self, kind: str, window: int = 2) -> None:
        if kind not in ops.POOL_KINDS:
            raise ValueError(f"unknown pool kind {kind!r}")
        self.kind = kind
        self.window = window

    def forward(self, x: Tensor) -> Tensor:
        return ops.pool(self.kind, x, self.window)

    def output_shape(self, shape: Shape) -> Shape:
        c, h, w = shape
        if self.kind == "global_avg":
            return (c, 1, 1)
        if h % self.window or w % self.window:
            raise ShapeError(f"pool window {self.window} does not divide input", shape)
        return (c, h // self.window, w // self.window)


class Reshape(Layer):
    """Reshape each sample; the batch axis is kept."""

    def __init__(self, shape: Sequence[int]) -> None:
        self.shape = tuple(shape)

    def forward(self, x: Tensor) -> Tensor:
        return ops.reshape(x, (x.shape[0],) + self.shape)

    def output_shape(self, shape: Shape) -> Shape:
        if int(np.prod(shape)) != int(np.prod(self.shape)):
            raise ShapeError("reshape changes the element count", shape, self.shape)
        return self.shape


class Sequential(Module):
    """Named layers applied in order."""

    def __init__(self, layers: Sequence[Tuple[str, Layer]]) -> None:
        self.layers: List[Tuple[str, Layer]] = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for _, layer in self.layers:
            x = layer(x)
        return x

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def output_shape(self, shape: Shape) -> Shape:
        for _, layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, layer in self.layers:
            yield from layer.named_parameters(_join(prefix, name))
