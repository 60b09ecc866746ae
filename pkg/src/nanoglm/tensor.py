"""Minimal dense numeric kernel.

Shaped arrays in flat row-major storage plus the handful of operations the
transformer needs: matrix product, stable softmax, layer normalization.
Everything runs in 32-bit float by default; a 64-bit mode exists so gradient
checks can use tight tolerances.

The public operations take and return :class:`Tensor`. The ``*_np`` helpers
operate on raw numpy arrays and are the hot path used by the model
internals; the Tensor ops are thin validated wrappers over them.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from .errors import DimensionError


class Precision(enum.Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> type:
        return np.float32 if self is Precision.F32 else np.float64


_PREC_BY_DTYPE = {np.dtype(np.float32): Precision.F32, np.dtype(np.float64): Precision.F64}


class Tensor:
    """Immutable shaped numeric array.

    Row-major flat storage, no views or strides. ``data`` is the flat
    sequence; its length always equals the product of ``shape``.
    """

    __slots__ = ("a",)

    def __init__(self, array, precision: Precision | None = None):
        dtype = (precision or Precision.F32).dtype if precision is not None else None
        arr = np.array(array, dtype=dtype, order="C")
        if arr.dtype not in _PREC_BY_DTYPE:
            arr = arr.astype(np.float32)
        arr.setflags(write=False)
        self.a = arr

    @classmethod
    def from_flat(cls, shape: Sequence[int], data, precision: Precision = Precision.F32) -> "Tensor":
        arr = np.asarray(data, dtype=precision.dtype).reshape(-1)
        n = int(np.prod(shape)) if len(shape) else 1
        if arr.size != n:
            raise DimensionError(f"flat data of length {arr.size} does not fill shape {tuple(shape)}")
        return cls(arr.reshape(tuple(shape)))

    @classmethod
    def zeros(cls, shape: Sequence[int], precision: Precision = Precision.F32) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=precision.dtype))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.a.shape

    @property
    def size(self) -> int:
        return self.a.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the elements (read-only)."""
        return self.a.reshape(-1)

    @property
    def precision(self) -> Precision:
        return _PREC_BY_DTYPE[self.a.dtype]

    def astype(self, precision: Precision) -> "Tensor":
        if precision is self.precision:
            return self
        return Tensor(self.a.astype(precision.dtype))

    def tolist(self):
        return self.a.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision.value})"


def matmul_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return a @ b


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax with max-subtraction for stability."""
    if x.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm_np(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.precision is not b.precision:
        raise DimensionError(f"matmul: mixed precision {a.precision.value} x {b.precision.value}")
    return Tensor(matmul_np(a.a, b.a))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Tensor(softmax_np(x.a, axis=axis))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise DimensionError(f"layer_norm: eps must be positive, got {eps}")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis of {x.shape}"
        )
    return Tensor(layer_norm_np(x.a, gain.a, bias.a, eps))
