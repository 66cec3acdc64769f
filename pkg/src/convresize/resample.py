"""Separable resamplers (bilinear, bicubic, Lanczos-3) at arbitrary sizes.

Every resize is a linear operator built from two 1-D row-stochastic
matrices, one per spatial axis.  The backward pass is the exact transpose
of the same sparse matrices, so the adjoint identity
``<R x, y> == <x, R^T y>`` holds by construction.

Geometry: half-pixel centers, ``src = (dst + 0.5) * src_len / dst_len - 0.5``.
When antialiasing and shrinking, the kernel is stretched by
``src_len / dst_len`` so every source pixel contributes.  Taps falling
outside the image are clamped to the border pixel and each row is
renormalized to sum to one.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from fractions import Fraction
from typing import Literal

import numpy as np
import scipy.sparse

from .errors import IndivisibleSizeError, ShapeError
from .tensor import DTYPE, check_tensor, format_scale, parse_scale

FilterTag = Literal["bilinear", "bicubic", "lanczos3"]

_BICUBIC_A = -0.5


def _triangle(x: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(x))


def _keys_cubic(x: np.ndarray) -> np.ndarray:
    a = _BICUBIC_A
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def _sinc(x: np.ndarray) -> np.ndarray:
    # np.sinc(1.0) is ~4e-17, not 0; integer inputs must give exact zeros
    # so that identity-scale matrices come out as exact identities.
    out = np.sinc(x)
    out[(x == np.floor(x)) & (x != 0)] = 0.0
    return out


def _lanczos3(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < 3.0, _sinc(x) * _sinc(x / 3.0), 0.0)


_KERNELS = {
    "bilinear": (_triangle, 1.0),
    "bicubic": (_keys_cubic, 2.0),
    "lanczos3": (_lanczos3, 3.0),
}


@dataclasses.dataclass(frozen=True)
class FilterKind:
    """Resampling kernel choice.

    Attributes:
        tag: ``"bilinear"``, ``"bicubic"`` (Keys, a = -0.5) or ``"lanczos3"``.
        antialias: stretch the kernel by the shrink factor when downscaling.
    """

    tag: FilterTag
    antialias: bool = True

    def __post_init__(self):
        if self.tag not in _KERNELS:
            raise ValueError(f"unknown filter {self.tag!r}; expected one of {sorted(_KERNELS)}")

    @property
    def radius(self) -> float:
        return _KERNELS[self.tag][1]

    def kernel(self, x) -> np.ndarray:
        return _KERNELS[self.tag][0](np.asarray(x, dtype=np.float64))

    @classmethod
    def parse(cls, text: str) -> FilterKind:
        """``"bicubic"``, ``"lanczos"`` / ``"lanczos3"``, optional ``"-noaa"`` suffix."""
        text = text.strip().lower()
        antialias = True
        if text.endswith("-noaa"):
            text, antialias = text[: -len("-noaa")], False
        if text == "lanczos":
            text = "lanczos3"
        return cls(text, antialias)  # type: ignore[arg-type]


BILINEAR = FilterKind("bilinear")
BICUBIC = FilterKind("bicubic")
LANCZOS3 = FilterKind("lanczos3")


@dataclasses.dataclass(frozen=True, eq=False)
class ResampleMatrix:
    """Sparse 1-D resampling operator, ``dst_len x src_len``.

    ``starts[i]`` is the first source index of row ``i`` and ``weights[i]``
    the contiguous run of weights beginning there.
    """

    src_len: int
    dst_len: int
    starts: tuple[int, ...]
    weights: tuple[np.ndarray, ...]

    def rows(self) -> list[list[tuple[int, float]]]:
        """Per destination index, the ``(source index, weight)`` pairs."""
        return [
            [(start + k, float(w)) for k, w in enumerate(ws)]
            for start, ws in zip(self.starts, self.weights)
        ]

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.dst_len, self.src_len))
        for i, (start, ws) in enumerate(zip(self.starts, self.weights)):
            dense[i, start : start + len(ws)] = ws
        return dense

    @functools.cached_property
    def operator(self) -> scipy.sparse.csr_matrix:
        """float32 CSR form used by the forward and backward passes."""
        lengths = [len(ws) for ws in self.weights]
        indptr = np.concatenate([[0], np.cumsum(lengths)])
        indices = np.concatenate([np.arange(s, s + n) for s, n in zip(self.starts, lengths)])
        data = np.concatenate(self.weights).astype(DTYPE)
        return scipy.sparse.csr_matrix((data, indices, indptr), shape=(self.dst_len, self.src_len))

    @functools.cached_property
    def operator_t(self) -> scipy.sparse.csr_matrix:
        return self.operator.T.tocsr()


@functools.lru_cache(maxsize=256)
def build_resample_matrix(filt: FilterKind, src_len: int, dst_len: int) -> ResampleMatrix:
    """Assemble the 1-D operator mapping ``src_len`` samples to ``dst_len``."""
    if src_len < 1 or dst_len < 1:
        raise ShapeError(f"resample lengths must be >= 1, got {src_len} -> {dst_len}")
    ratio = src_len / dst_len
    stretch = ratio if (filt.antialias and src_len > dst_len) else 1.0
    support = filt.radius * stretch
    ntaps = int(math.ceil(2.0 * support)) + 2

    i = np.arange(dst_len)
    centers = ((2 * i + 1) * src_len - dst_len) / (2.0 * dst_len)
    first = np.floor(centers - support).astype(np.int64)
    taps = first[:, None] + np.arange(ntaps)[None, :]
    w = filt.kernel((taps - centers[:, None]) / stretch)
    clamped = np.clip(taps, 0, src_len - 1)

    starts, weights = [], []
    for row in range(dst_len):
        lo, hi = clamped[row, 0], clamped[row, -1]
        acc = np.bincount(clamped[row] - lo, weights=w[row], minlength=hi - lo + 1)
        nz = np.flatnonzero(acc)
        acc = acc[nz[0] : nz[-1] + 1]
        starts.append(int(lo + nz[0]))
        weights.append(acc / acc.sum())
    return ResampleMatrix(src_len, dst_len, tuple(starts), tuple(weights))


def _apply(x: np.ndarray, mat: scipy.sparse.csr_matrix, axis: int) -> np.ndarray:
    moved = np.moveaxis(x, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    out = np.asarray(mat @ flat, dtype=DTYPE).reshape((mat.shape[0],) + moved.shape[1:])
    return np.ascontiguousarray(np.moveaxis(out, 0, axis))


def resize_forward(x: np.ndarray, filt: FilterKind, out_h: int, out_w: int) -> np.ndarray:
    """Resize an NHWC tensor to ``(out_h, out_w)``: height pass, then width."""
    check_tensor(x)
    _, h, w, _ = x.shape
    rh = build_resample_matrix(filt, h, out_h)
    rw = build_resample_matrix(filt, w, out_w)
    return _apply(_apply(x, rh.operator, 1), rw.operator, 2)


def resize_backward(grad_out: np.ndarray, filt: FilterKind, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of :func:`resize_forward` from an ``(in_h, in_w)`` input."""
    check_tensor(grad_out, "grad_out")
    _, out_h, out_w, _ = grad_out.shape
    if in_h < 1 or in_w < 1:
        raise ShapeError(f"input size must be positive, got {in_h}x{in_w}")
    rh = build_resample_matrix(filt, in_h, out_h)
    rw = build_resample_matrix(filt, in_w, out_w)
    return _apply(_apply(grad_out, rw.operator_t, 2), rh.operator_t, 1)


def scaled_dims(h: int, w: int, scale: Fraction, direction: Literal["down", "up"]) -> tuple[int, int]:
    """Output dims for resizing by ``scale``.

    Downscaling must be exact (``h * q / p`` integral) or it raises
    :class:`IndivisibleSizeError`.  Upscaling rounds half up when
    ``h * p / q`` is fractional.
    """
    scale = parse_scale(scale)
    p, q = scale.numerator, scale.denominator
    if direction == "down":
        if (h * q) % p or (w * q) % p:
            raise IndivisibleSizeError(
                f"{h}x{w} cannot be downscaled exactly by {format_scale(scale)}; crop to a multiple first"
            )
        return h * q // p, w * q // p
    if direction == "up":
        return (2 * h * p + q) // (2 * q), (2 * w * p + q) // (2 * q)
    raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")


def resize_by_scale(
    x: np.ndarray, filt: FilterKind, scale: Fraction | str, direction: Literal["down", "up"] = "down"
) -> np.ndarray:
    """Resize by a rational factor ``M = p/q`` (down divides dims by M)."""
    check_tensor(x)
    out_h, out_w = scaled_dims(x.shape[1], x.shape[2], scale, direction)
    return resize_forward(x, filt, out_h, out_w)
