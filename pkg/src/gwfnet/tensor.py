"""Dense tensor helpers.

Tensors are plain ``numpy.ndarray`` objects (C order, last axis fastest).
The functions here add the shape validation the rest of the package relies on.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

VERIFY_DTYPE = np.float64
TRAIN_DTYPE = np.float32


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ShapeError("shape must have at least one axis")
    if any(s < 1 for s in shape):
        raise ShapeError(f"every extent must be >= 1, got {shape}")
    return shape


def tensor_new(shape: Sequence[int], fill=0.0, dtype=VERIFY_DTYPE) -> np.ndarray:
    """Create a tensor, either constant-filled or populated in row-major order.

    Args:
        shape: positive extents.
        fill: a scalar, or a flat sequence with ``prod(shape)`` values.
        dtype: element type (float64 for verification, float32 for training).
    """
    shape = _check_shape(shape)
    if np.ndim(fill) == 0:
        return np.full(shape, fill, dtype=dtype)
    values = np.asarray(fill, dtype=dtype).ravel()
    expected = int(np.prod(shape))
    if values.size != expected:
        raise ShapeError(f"{values.size} values given for shape {shape} ({expected} required)")
    return values.reshape(shape).copy()


def map_zip(a: np.ndarray, b: np.ndarray, op: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    """Apply a binary elementwise function to two tensors of identical shape."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    out = np.asarray(op(a, b))
    if out.shape != a.shape:
        raise ShapeError(f"operation changed shape {a.shape} -> {out.shape}")
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product with an explicit inner-extent check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def argmax_flat(t: np.ndarray) -> int:
    """Row-major index of the maximum; ties go to the lowest index."""
    t = np.asarray(t)
    if t.size == 0:
        raise ShapeError("argmax of an empty tensor")
    # np.argmax returns the first occurrence
    return int(np.argmax(t.ravel()))


def flat_index(shape: Sequence[int], index: Sequence[int]) -> int:
    """Row-major offset of a multi-index."""
    shape = _check_shape(shape)
    if len(index) != len(shape):
        raise ShapeError(f"index rank {len(index)} does not match shape rank {len(shape)}")
    offset = 0
    for extent, i in zip(shape, index):
        if not 0 <= i < extent:
            raise ShapeError(f"index {tuple(index)} out of bounds for {shape}")
        offset = offset * extent + int(i)
    return offset


def is_finite(t: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(t)))


def check_finite(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Raise ``FloatingPointError`` if ``t`` holds NaN or Inf."""
    if not is_finite(t):
        raise FloatingPointError(f"{name} contains non-finite values")
    return t
