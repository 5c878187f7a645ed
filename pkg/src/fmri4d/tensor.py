"""Dense tensors, elementwise/reduction primitives and seeded random numbers.

Axis convention everywhere in the package is ``N, C, X, Y, Z, T`` (batch,
channel, three spatial axes, time). Lower-rank tensors drop trailing or
leading axes as documented by each operation.

A :class:`Tensor` owns a C-contiguous, read-only numpy buffer of dtype
float32 or float64. Every operation returns a new tensor; inputs are never
mutated.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

MAX_RANK = 6
DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Raised for inconsistent shapes, bad axes or buffer/shape mismatches."""


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in DTYPES:
        raise TypeError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds maximum rank {MAX_RANK}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


class Tensor:
    """Immutable dense array with C-order layout.

    Use :func:`zeros`, :func:`full`, :func:`from_data` or ``Tensor(array)``
    to construct. ``Tensor(array)`` copies ``array`` unless ``copy=False`` is
    passed, in which case the caller hands over ownership of the buffer.
    """

    __slots__ = ("_a",)

    def __init__(self, data, dtype=None, *, copy: bool = True):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in DTYPES else np.float32
        dt = _as_dtype(dtype)
        a = np.array(data, dtype=dt, order="C", copy=True) if copy else np.ascontiguousarray(data, dtype=dt)
        _check_shape(a.shape)
        a.flags.writeable = False
        self._a = a

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the underlying buffer."""
        return self._a

    @property
    def shape(self) -> tuple[int, ...]:
        return self._a.shape

    @property
    def rank(self) -> int:
        return self._a.ndim

    @property
    def dtype(self) -> np.dtype:
        return self._a.dtype

    @property
    def size(self) -> int:
        return self._a.size

    @property
    def strides(self) -> tuple[int, ...]:
        """Strides in elements (not bytes)."""
        return tuple(s // self._a.itemsize for s in self._a.strides)

    def numpy(self) -> np.ndarray:
        """Writable copy of the contents."""
        return self._a.copy()

    def item(self, *index: int) -> float:
        return float(self._a[index] if index else self._a.reshape(-1)[0])

    def astype(self, dtype) -> Tensor:
        dt = _as_dtype(dtype)
        if dt == self.dtype:
            return self
        return Tensor(self._a.astype(dt), copy=False)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = tuple(shape[0])
        shape = _check_shape(shape)
        if math.prod(shape) != self.size:
            raise ShapeError(f"cannot reshape {self.shape} to {shape}")
        return Tensor(self._a.reshape(shape), copy=True)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and self.dtype == other.dtype and np.array_equal(self._a, other._a)

    __hash__ = None

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.name})"


def wrap(array: np.ndarray) -> Tensor:
    """Take ownership of a freshly computed array without copying it."""
    return Tensor(array, dtype=array.dtype if array.dtype in DTYPES else np.float32, copy=False)


# -- construction -----------------------------------------------------------

def zeros(shape: Sequence[int], dtype=np.float32) -> Tensor:
    return wrap(np.zeros(_check_shape(shape), dtype=_as_dtype(dtype)))


def full(shape: Sequence[int], value: float, dtype=np.float32) -> Tensor:
    return wrap(np.full(_check_shape(shape), value, dtype=_as_dtype(dtype)))


def from_data(shape: Sequence[int], buffer: Iterable[float], dtype=np.float32) -> Tensor:
    shape = _check_shape(shape)
    flat = np.array(buffer, dtype=_as_dtype(dtype)).reshape(-1)
    if flat.size != math.prod(shape):
        raise ShapeError(f"buffer has {flat.size} elements, shape {list(shape)} needs {math.prod(shape)}")
    return wrap(flat.reshape(shape))


def to_buffer(t: Tensor) -> np.ndarray:
    """Flat C-order copy of the tensor contents."""
    return t.data.reshape(-1).copy()


# -- elementwise -------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    # exp(-log(1 + exp(-x))) stays accurate for large |x| of either sign
    return np.exp(-np.logaddexp(0.0, -x)).astype(x.dtype, copy=False)


_UNARY = {
    "relu": lambda x: np.maximum(x, 0),
    "sigmoid": sigmoid_array,
    "tanh": np.tanh,
    "exp": np.exp,
    "ln": np.log,
}
_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Apply ``op`` elementwise. ``scale`` takes a Python scalar as ``b``."""
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} is unary")
        return wrap(_UNARY[op](a.data))
    if op in _BINARY:
        if not isinstance(b, Tensor):
            raise TypeError(f"{op} needs a second tensor operand")
        _same_shape(a, b, op)
        return wrap(_BINARY[op](a.data, b.data))
    if op == "scale":
        if isinstance(b, Tensor) or b is None:
            raise TypeError("scale needs a scalar operand")
        return wrap((a.data * a.dtype.type(b)).astype(a.dtype, copy=False))
    raise ValueError(f"unknown elementwise op {op!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def scale(a: Tensor, s: float) -> Tensor:
    return elementwise("scale", a, s)


def relu(a: Tensor) -> Tensor:
    return elementwise("relu", a)


def sigmoid(a: Tensor) -> Tensor:
    return elementwise("sigmoid", a)


def tanh(a: Tensor) -> Tensor:
    return elementwise("tanh", a)


def exp(a: Tensor) -> Tensor:
    return elementwise("exp", a)


def ln(a: Tensor) -> Tensor:
    return elementwise("ln", a)


# -- linear algebra / reductions --------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``[M,K]`` and ``[K,N]``; accumulates in the operands' dtype (BLAS)."""
    if a.rank != 2 or b.rank != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape[1]} vs {b.shape[0]}")
    if a.dtype != b.dtype:
        raise TypeError("matmul dtype mismatch")
    return wrap(a.data @ b.data)


def reduce(op: str, a: Tensor, axis: int | None = None) -> Tensor:
    """Reduce over ``axis`` (removed from the result) or over everything if ``None``.

    ``std_population`` divides by the number of reduced elements.
    """
    if axis is not None:
        if not -a.rank <= axis < a.rank:
            raise ShapeError(f"axis {axis} out of range for rank {a.rank}")
    x = a.data
    if op == "sum":
        r = x.sum(axis=axis)
    elif op == "mean":
        r = x.mean(axis=axis)
    elif op == "std_population":
        r = x.std(axis=axis, ddof=0)
    elif op == "max":
        r = x.max(axis=axis)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return wrap(np.asarray(r, dtype=a.dtype))


# -- padding / cropping ------------------------------------------------------

def _amounts(a: Tensor, amounts: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    if len(amounts) != a.rank:
        raise ShapeError(f"need one (lo, hi) pair per axis ({a.rank}), got {len(amounts)}")
    out = []
    for lo, hi in amounts:
        if lo < 0 or hi < 0:
            raise ShapeError("pad/crop amounts must be non-negative")
        out.append((int(lo), int(hi)))
    return out


def pad(a: Tensor, amounts: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad ``lo`` elements before and ``hi`` after each axis."""
    return wrap(np.pad(a.data, _amounts(a, amounts)))


def crop(a: Tensor, amounts: Sequence[tuple[int, int]]) -> Tensor:
    """Remove ``lo`` elements from the start and ``hi`` from the end of each axis."""
    index = []
    for n, (lo, hi) in zip(a.shape, _amounts(a, amounts)):
        if lo + hi >= n:
            raise ShapeError(f"crop ({lo}, {hi}) leaves nothing of extent {n}")
        index.append(slice(lo, n - hi))
    return wrap(a.data[tuple(index)].copy())


def window(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Crop ``[start, start + length)`` along one axis."""
    n = a.shape[axis]
    if start < 0 or length < 1 or start + length > n:
        raise ShapeError(f"window [{start}, {start + length}) outside extent {n}")
    amounts = [(0, 0)] * a.rank
    amounts[axis] = (start, n - start - length)
    return crop(a, amounts)


# -- random numbers ----------------------------------------------------------

class Rng:
    """Seeded generator: numpy's Philox-4x64 counter-based bit generator.

    Normal variates use numpy's ziggurat transform. Both are fixed by the
    numpy ``Generator`` stability policy, so a seed reproduces the same
    stream on every platform.
    """

    algorithm = "philox4x64-10"

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.Philox(self.seed))

    @property
    def state(self) -> dict:
        return self.generator.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self.generator.bit_generator.state = value

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in ``[low, high)``."""
        return self.generator.integers(low, high, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def standard_normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)


def rand_normal(rng: Rng, shape: Sequence[int], mean: float = 0.0, stddev: float = 1.0, dtype=np.float32) -> Tensor:
    if stddev < 0:
        raise ValueError("stddev must be >= 0")
    shape = _check_shape(shape)
    z = rng.standard_normal(shape)
    return wrap((mean + stddev * z).astype(_as_dtype(dtype)))
