"""Dense tensors and the gradient tape that differentiates them.

Operations only record themselves while a :class:`Tape` is active in the
current context and at least one input requires a gradient.  Outside a tape
every operation is a plain forward computation, which is what evaluation and
the finite-difference oracle rely on.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

_DEFAULT_DTYPE: contextvars.ContextVar = contextvars.ContextVar("autodiff_dtype", default=np.float32)
_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("autodiff_tape", default=None)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def get_default_dtype() -> type:
    return _DEFAULT_DTYPE.get()


@contextmanager
def precision(dtype: type) -> Iterator[None]:
    """Create new tensors with ``dtype`` inside the block.

    Training always runs in float32; float64 exists for the gradient oracle,
    where central differences in single precision drown in rounding error.
    """

    token = _DEFAULT_DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.reset(token)


def active_tape() -> Optional["Tape"]:
    return _ACTIVE_TAPE.get()


class Tensor:
    """An n-dimensional array with an optional gradient.

    Attributes
    ----------
    data: np.ndarray
        Row-major values; ``data.shape`` is the tensor shape.
    grad: Optional[np.ndarray]
        Accumulated gradient of the same shape, populated by ``backward``.
    requires_grad: bool
        Whether operations consuming this tensor are recorded on the tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> None:
        self.data = np.array(data, dtype=get_default_dtype(), order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(array)
        out.grad = None
        out.requires_grad = False
        out.name = None
        out._tape = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad = self.grad + grad

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Arithmetic sugar used by the losses; see ops for the rules.
    def __add__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import ops

        return ops.add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import ops

        return ops.add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import ops

        return ops.sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import ops

        return ops.sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import ops

        return ops.mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import ops

        return ops.mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import ops

        return ops.div(self, other)

    def __neg__(self) -> "Tensor":
        from src.autodiff import ops

        return ops.mul(self, -1.0)


@dataclass
class TapeRecord:
    """One recorded operation: its inputs, its output and its backward rule."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered log of differentiable operations.

    Used as a context manager; the tape is bound to the current context only,
    so independent training runs on separate threads never see each other's
    records.
    """

    def __init__(self) -> None:
        self.records: List[TapeRecord] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        output.requires_grad = True
        output._tape = self
        self.records.append(TapeRecord(op=op, inputs=inputs, output=output, backward=backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(.) to every reachable tensor that requires it.

        Records are replayed in exact reverse order of recording.  Gradients
        add into ``.grad``, so calling this twice doubles every gradient.
        """

        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")

        pending = {id(loss): np.ones_like(loss.data)}
        for record in reversed(self.records):
            grad = pending.pop(id(record.output), None)
            if grad is None:
                continue
            record.output._accumulate(grad)
            for tensor, input_grad in zip(record.inputs, record.backward(grad)):
                if input_grad is None or not tensor.requires_grad:
                    continue
                if tensor._tape is self:
                    key = id(tensor)
                    pending[key] = pending[key] + input_grad if key in pending else input_grad
                else:
                    tensor._accumulate(input_grad)


def backward(loss: Tensor) -> None:
    """Differentiate ``loss`` on the tape that recorded it."""

    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("loss is not connected to any tape; build it inside `with Tape():`")
    loss._tape.backward(loss)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def make_output(
    op: str,
    array: np.ndarray,
    inputs: Tuple[Tensor, ...],
    backward_fn: BackwardFn,
) -> Tensor:
    """Wrap an op result and record it when a tape is listening."""

    out = Tensor._wrap(array)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out
