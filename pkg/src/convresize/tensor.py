"""Dense (batch, height, width, channels) float32 tensors and rational scales.

Tensors are plain ``numpy.ndarray`` objects with a fixed NHWC layout and
float32 dtype; the helpers here validate that contract at public boundaries.
Scale factors are ``fractions.Fraction`` values so that resizer geometry and
crop sizes are computed exactly.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Literal

import numpy as np

from .errors import IndivisibleSizeError, ScaleError, ShapeError

DTYPE = np.float32

Shape4 = tuple[int, int, int, int]


def check_tensor(x: np.ndarray, name: str = "x", finite: bool = True) -> np.ndarray:
    """Validate the NHWC float32 contract and return ``x`` unchanged."""
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D (n, h, w, c) array, got {getattr(x, 'shape', type(x))}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    if x.dtype != DTYPE:
        raise ShapeError(f"{name} must be float32, got {x.dtype}")
    if finite and not np.isfinite(x).all():
        raise ShapeError(f"{name} contains NaN or Inf")
    return x


def as_tensor(data, shape: Shape4 | None = None) -> np.ndarray:
    """Convert array-like data to a validated float32 NHWC tensor.

    Args:
        data: anything ``np.asarray`` accepts.
        shape: optional target shape; ``data`` is reshaped to it (so a flat
            list can be turned into a tensor).
    """
    arr = np.array(data, dtype=DTYPE)
    if shape is not None:
        if arr.size != math.prod(shape):
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    return check_tensor(np.ascontiguousarray(arr))


def create(shape: Shape4, fill: float = 0.0) -> np.ndarray:
    """Return a tensor of ``shape`` with every element equal to ``fill``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or any(s < 1 for s in shape):
        raise ShapeError(f"shape must be four positive integers, got {shape}")
    return np.full(shape, fill, dtype=DTYPE)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    check_tensor(a, "a")
    check_tensor(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def map_binary(a: np.ndarray, b: np.ndarray, op: Literal["add", "sub", "mul"]) -> np.ndarray:
    """Elementwise ``a op b`` for two tensors of identical shape."""
    _same_shape(a, b)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    raise ValueError(f"unknown op {op!r}")


def dot(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product over all elements.

    Products are formed in float64 and summed with ``math.fsum``, which is
    correctly rounded and therefore independent of summation order:
    ``dot(a, b) == dot(b, a)`` holds bit-for-bit.
    """
    _same_shape(a, b)
    prod = a.astype(np.float64).ravel() * b.astype(np.float64).ravel()
    return math.fsum(prod.tolist())


# --- rational scales -------------------------------------------------------


def parse_scale(value: str | int | float | Fraction) -> Fraction:
    """Parse ``"3/2"``, ``"1.5"``, ``2`` or a Fraction into a scale factor.

    Decimal strings are read exactly ("2.5" -> 5/2). Floats go through
    ``limit_denominator`` so ``1.5`` becomes 3/2 rather than a binary
    approximation.
    """
    if isinstance(value, Fraction):
        scale = value
    elif isinstance(value, float):
        scale = Fraction(value).limit_denominator(1000)
    else:
        try:
            scale = Fraction(str(value).strip())
        except (ValueError, ZeroDivisionError) as exc:
            raise ScaleError(f"cannot parse scale {value!r}") from exc
    if scale <= 0:
        raise ScaleError(f"scale must be positive, got {value!r}")
    return scale


def check_downscale(scale: Fraction) -> Fraction:
    """Return ``scale`` if it is a valid downsampling factor (M >= 1)."""
    scale = parse_scale(scale)
    if scale < 1:
        raise ScaleError(f"downsampling factor must be >= 1, got {scale}")
    return scale


def format_scale(scale: Fraction) -> str:
    return f"{scale.numerator}/{scale.denominator}"


def downscaled_size(n: int, scale: Fraction) -> int:
    """Exact ``n / scale``; raises if it is not an integer."""
    num = n * scale.denominator
    if num % scale.numerator:
        raise IndivisibleSizeError(
            f"size {n} is not divisible by scale {format_scale(scale)}; crop to a multiple first"
        )
    return num // scale.numerator

