"""Rank-4 ``(n, c, h, w)`` tensors.

Tensors are plain C-contiguous :class:`numpy.ndarray` objects of dtype
``float32`` ("single") or ``float64`` ("double"). The helpers here enforce the
shape contracts the rest of the package depends on; nothing broadcasts.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ShapeError

PRECISIONS = {"single": np.float32, "double": np.float64}

# Largest element count we agree to allocate (fits a signed 64-bit index).
MAX_ELEMENTS = 2**62


class Shape4(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    def numel(self) -> int:
        return self.n * self.c * self.h * self.w


def as_shape(shape) -> Shape4:
    if len(shape) != 4:
        raise ShapeError(f"expected a rank-4 shape, got {tuple(shape)}")
    dims = tuple(int(d) for d in shape)
    if any(d < 1 for d in dims):
        raise ShapeError(f"all shape components must be >= 1, got {dims}")
    s = Shape4(*dims)
    if s.numel() > MAX_ELEMENTS:
        raise ShapeError(f"element count of {dims} overflows the addressable range")
    return s


def dtype_of(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def tensor_new(shape, fill: float = 0.0, precision="single") -> np.ndarray:
    s = as_shape(shape)
    return np.full(s, fill, dtype=dtype_of(precision))


def check_tensor(t: np.ndarray, name: str = "tensor") -> Shape4:
    if not isinstance(t, np.ndarray) or t.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 array, got {getattr(t, 'shape', type(t))}")
    return as_shape(t.shape)


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor(a, "a")
    check_tensor(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"precision mismatch: {a.dtype} vs {b.dtype}")
    return a + b


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sa, sb = check_tensor(a, "a"), check_tensor(b, "b")
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    if a.dtype != b.dtype:
        raise ShapeError(f"precision mismatch: {a.dtype} vs {b.dtype}")
    return np.concatenate([a, b], axis=1)


def slice_channels(t: np.ndarray, start: int, stop: int) -> np.ndarray:
    s = check_tensor(t)
    if not 0 <= start < stop <= s.c:
        raise IndexError(f"channel range [{start}, {stop}) invalid for {s.c} channels")
    return np.ascontiguousarray(t[:, start:stop])
