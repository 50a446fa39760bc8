"""Dense rank-4 tensors, named parameters, and the reverse-mode gradient tape.

Tensors are immutable values: construction freezes the underlying buffer and
every operation returns a new tensor. A :class:`GradTape` together with the
parameters it touches forms a single-writer unit; one forward/backward
sequence runs on one thread at a time (enforced via a thread-local active
tape).
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

from .errors import ShapeError, TapeError

_UIDS = itertools.count(1)

REAL_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
COMPLEX_DTYPES = (np.dtype(np.complex64), np.dtype(np.complex128))

#: complex dtype matching each real precision (and back)
complex_for = {np.dtype(np.float32): np.complex64, np.dtype(np.float64): np.complex128}
real_for = {np.dtype(np.complex64): np.float32, np.dtype(np.complex128): np.float64}


def _freeze(arr: np.ndarray) -> np.ndarray:
    if arr.ndim != 4:
        raise ShapeError(f"rank-4 tensor required, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr)
    view = arr.view()
    view.flags.writeable = False
    return view


class RealTensor4:
    """Immutable [N, C, H, W] array of float32/float64 scalars, row-major."""

    __slots__ = ("_data", "uid", "param")

    def __init__(self, data, dtype=None, copy: bool = True):
        arr = np.array(data, dtype=dtype, copy=copy)
        if arr.dtype not in REAL_DTYPES:
            arr = arr.astype(np.float64)
        self._data = _freeze(arr)
        self.uid = next(_UIDS)
        self.param: "Parameter | None" = None

    @classmethod
    def zeros(cls, dims, dtype=np.float64) -> "RealTensor4":
        return cls(np.zeros(dims, dtype=dtype), copy=False)

    @classmethod
    def full(cls, dims, value: float, dtype=np.float64) -> "RealTensor4":
        return cls(np.full(dims, value, dtype=dtype), copy=False)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self._data.shape

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the underlying buffer."""
        return self._data

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got dims {self.dims}")
        return float(self._data.reshape(()))

    def __repr__(self) -> str:
        return f"RealTensor4(dims={self.dims}, dtype={self._data.dtype})"


class ComplexTensor4:
    """Immutable [N, C, H, W] array of complex scalars (frequency features)."""

    __slots__ = ("_data", "uid", "param")

    def __init__(self, data, dtype=None, copy: bool = True):
        arr = np.array(data, dtype=dtype, copy=copy)
        if arr.dtype not in COMPLEX_DTYPES:
            arr = arr.astype(np.complex128)
        self._data = _freeze(arr)
        self.uid = next(_UIDS)
        self.param = None

    @classmethod
    def zeros(cls, dims, dtype=np.complex128) -> "ComplexTensor4":
        return cls(np.zeros(dims, dtype=dtype), copy=False)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self._data.shape

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    def __repr__(self) -> str:
        return f"ComplexTensor4(dims={self.dims}, dtype={self._data.dtype})"


class Parameter:
    """A named, trainable tensor with an accumulated-gradient buffer.

    ``grad`` accumulates across backward passes until :meth:`zero_grad`.
    Assigning a new value keeps the name, dims, dtype and gradient buffer.
    """

    __slots__ = ("name", "trainable", "_value", "_grad", "grad_events")

    def __init__(self, name: str, value: RealTensor4, trainable: bool = True):
        self.name = name
        self.trainable = trainable
        self._value = value
        value.param = self
        self._grad = np.zeros(value.dims, dtype=value.data.dtype)
        self.grad_events = 0

    @property
    def value(self) -> RealTensor4:
        return self._value

    @property
    def grad(self) -> RealTensor4:
        return RealTensor4(self._grad, copy=False)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self._value.dims

    def assign(self, data: np.ndarray, copy: bool = True) -> None:
        """Replace the value with a same-shape, same-dtype tensor.

        ``copy=False`` transfers ownership of a freshly computed array.
        """
        arr = np.asarray(data)
        if arr.shape != self._value.dims:
            raise ShapeError(f"parameter '{self.name}': assign shape {arr.shape} != {self._value.dims}")
        if arr.dtype != self._grad.dtype:
            arr = arr.astype(self._grad.dtype)
        elif copy:
            arr = arr.copy()
        self._value = RealTensor4(arr, copy=False)
        self._value.param = self

    def accumulate_grad(self, g: np.ndarray) -> None:
        self._grad += g
        self.grad_events += 1

    def zero_grad(self) -> None:
        self._grad[...] = 0
        self.grad_events = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, dims={self._value.dims}, trainable={self.trainable})"


class ParameterRegistry:
    """Flat, insertion-ordered map of unique parameter names to parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def create(self, name: str, data: np.ndarray, trainable: bool = True) -> Parameter:
        param = Parameter(name, RealTensor4(data), trainable)
        self.register(param)
        return param

    def register(self, param: Parameter) -> None:
        if param.name in self._params:
            raise ShapeError(f"duplicate parameter name '{param.name}'")
        self._params[param.name] = param

    def get(self, name: str) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise ShapeError(f"unknown parameter '{name}'") from None

    def names(self) -> list[str]:
        return list(self._params)

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def grad_events(self) -> int:
        return sum(p.grad_events for p in self._params.values())

    def total_parameters(self, prefix: str = "") -> int:
        """Scalar count over parameters whose name starts with ``prefix``."""
        return sum(
            int(np.prod(p.dims)) for p in self._params.values() if p.name.startswith(prefix)
        )


_ACTIVE = threading.local()


def active_tape() -> "GradTape | None":
    return getattr(_ACTIVE, "tape", None)


class GradTape:
    """Ordered record of executed primitives, replayed in reverse by backward.

    Use as a context manager around the forward pass::

        tape = GradTape()
        with tape:
            loss = ...
        tape.backward(loss)
    """

    def __init__(self):
        self._records: list[tuple[int, tuple, object]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "GradTape":
        if active_tape() is not None:
            raise TapeError("a gradient tape is already active on this thread")
        _ACTIVE.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.tape = None

    def record(self, out, inputs, backward_fn) -> None:
        self._records.append((out.uid, tuple(inputs), backward_fn))
        self._produced.add(out.uid)

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: RealTensor4) -> None:
        """Accumulate d(loss)/d(param) into every trainable parameter.

        Visits each recorded operation exactly once, in reverse execution
        order. Repeated calls keep accumulating until an explicit zero-grad.
        """
        if not self._records or loss.uid not in self._produced:
            raise TapeError("backward requires a scalar produced by a recorded forward pass")
        if loss.dims != (1, 1, 1, 1):
            raise ShapeError(f"loss must have dims [1,1,1,1], got {loss.dims}")
        grads: dict[int, np.ndarray] = {loss.uid: np.ones((1, 1, 1, 1), dtype=loss.data.dtype)}
        for out_uid, inputs, backward_fn in reversed(self._records):
            g = grads.pop(out_uid, None)
            if g is None:
                continue
            for tin, gi in zip(inputs, backward_fn(g)):
                if gi is None:
                    continue
                param = tin.param
                if param is not None:
                    if param.trainable:
                        param.accumulate_grad(gi)
                    continue
                prev = grads.get(tin.uid)
                grads[tin.uid] = gi if prev is None else prev + gi
