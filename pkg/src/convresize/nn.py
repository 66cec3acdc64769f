"""Convolution layers, downsampling blocks and the CNN-CR network.

All layers work on NHWC float32 arrays and carry hand-written backward
passes.  Four ways of putting the resolution change into the first stage
are supported:

* ``strided_conv``:  3x3 conv with stride M (integer M only)
* ``conv_pool``:     3x3 conv, stride 1, then M x M pooling (integer M only)
* ``conv_resize``:   3x3 conv, stride 1, then a bilinear resize by 1/M
* ``resize_conv``:   bilinear resize by 1/M, then a 3x3 conv, stride 1

The last two accept any rational M.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import struct
from fractions import Fraction
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import IndivisibleSizeError, MediaFormatError, ScaleError, ShapeError, StateError
from .resample import BICUBIC, BILINEAR, FilterKind, resize_backward, resize_by_scale, resize_forward, scaled_dims
from .tensor import DTYPE, check_downscale, check_tensor, format_scale, parse_scale

KSIZE = 3


@dataclasses.dataclass
class ConvLayer:
    """3x3 convolution with bias and 'same' zero padding of one pixel.

    ``weight`` has shape ``(3, 3, in_ch, out_ch)``; output size is
    ``ceil(H / stride) x ceil(W / stride)``.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=DTYPE)
        self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE)
        if self.weight.ndim != 4 or self.weight.shape[:2] != (KSIZE, KSIZE):
            raise ShapeError(f"conv weight must be (3, 3, in, out), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[3],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match out_ch {self.weight.shape[3]}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")

    @property
    def in_ch(self) -> int:
        return self.weight.shape[2]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[3]

    @classmethod
    def zeros(cls, in_ch: int, out_ch: int, stride: int = 1) -> ConvLayer:
        return cls(np.zeros((KSIZE, KSIZE, in_ch, out_ch), DTYPE), np.zeros(out_ch, DTYPE), stride)

    @classmethod
    def he_normal(cls, in_ch: int, out_ch: int, rng: np.random.Generator, stride: int = 1) -> ConvLayer:
        std = math.sqrt(2.0 / (KSIZE * KSIZE * in_ch))
        w = rng.standard_normal((KSIZE, KSIZE, in_ch, out_ch)) * std
        return cls(w.astype(DTYPE), np.zeros(out_ch, DTYPE), stride)


def _im2col(x: np.ndarray, stride: int) -> np.ndarray:
    """Rows of 3x3xC patches, shape ``(n * out_h * out_w, 9 * C)``."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (KSIZE, KSIZE), axis=(1, 2))  # (n, H, W, C, 3, 3)
    win = win[:, ::stride, ::stride]
    n, oh, ow, c = win.shape[:4]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, KSIZE * KSIZE * c)


def _out_size(h: int, w: int, stride: int) -> tuple[int, int]:
    return -(-h // stride), -(-w // stride)


def _conv_forward(x: np.ndarray, layer: ConvLayer) -> tuple[np.ndarray, np.ndarray]:
    n, h, w, c = x.shape
    if c != layer.in_ch:
        raise ShapeError(f"input has {c} channels, layer expects {layer.in_ch}")
    oh, ow = _out_size(h, w, layer.stride)
    cols = _im2col(x, layer.stride)
    y = cols @ layer.weight.reshape(-1, layer.out_ch)
    y += layer.bias
    return y.reshape(n, oh, ow, layer.out_ch), cols


def _conv_backward(
    cols: np.ndarray, x_shape: tuple, layer: ConvLayer, grad_out: np.ndarray, need_input_grad: bool = True
):
    n, h, w, c = x_shape
    oh, ow = _out_size(h, w, layer.stride)
    if grad_out.shape != (n, oh, ow, layer.out_ch):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, oh, ow, layer.out_ch)}")
    g2 = grad_out.reshape(-1, layer.out_ch)
    grad_w = (cols.T @ g2).reshape(layer.weight.shape)
    grad_b = g2.sum(axis=0, dtype=np.float64).astype(DTYPE)
    if not need_input_grad:
        return None, grad_w, grad_b

    gcols = (g2 @ layer.weight.reshape(-1, layer.out_ch).T).reshape(n, oh, ow, KSIZE, KSIZE, c)
    s = layer.stride
    gxp = np.zeros((n, h + 2, w + 2, c), DTYPE)
    for kh in range(KSIZE):
        for kw in range(KSIZE):
            gxp[:, kh : kh + s * oh : s, kw : kw + s * ow : s] += gcols[:, :, :, kh, kw]
    return gxp[:, 1 : h + 1, 1 : w + 1], grad_w, grad_b


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """'Same'-padded 3x3 cross-correlation plus bias, subsampled by the stride."""
    check_tensor(x)
    return _conv_forward(x, layer)[0]


def conv2d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    """Gradients of :func:`conv2d_forward`.

    Returns:
        ``(grad_x, grad_weight, grad_bias)``.
    """
    check_tensor(x)
    check_tensor(grad_out, "grad_out")
    cols = _im2col(x, layer.stride)
    return _conv_backward(cols, x.shape, layer, grad_out)


# --- pooling -----------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class PoolLayer:
    kind: Literal["max", "average"]
    factor: int

    def __post_init__(self):
        if self.kind not in ("max", "average"):
            raise ValueError(f"pool kind must be 'max' or 'average', got {self.kind!r}")
        if self.factor < 1:
            raise ValueError(f"pool factor must be >= 1, got {self.factor}")


def _pool_blocks(x: np.ndarray, m: int) -> np.ndarray:
    n, h, w, c = x.shape
    if h % m or w % m:
        raise IndivisibleSizeError(f"{h}x{w} is not divisible by pooling factor {m}")
    return x.reshape(n, h // m, m, w // m, m, c)


def pool_forward(x: np.ndarray, pool: PoolLayer) -> np.ndarray:
    blocks = _pool_blocks(x, pool.factor)
    if pool.kind == "average":
        return blocks.mean(axis=(2, 4), dtype=DTYPE)
    return blocks.max(axis=(2, 4))


def pool_backward(x: np.ndarray, pool: PoolLayer, grad_out: np.ndarray) -> np.ndarray:
    m = pool.factor
    n, h, w, c = x.shape
    if pool.kind == "average":
        g = np.broadcast_to(grad_out[:, :, None, :, None, :] / (m * m), (n, h // m, m, w // m, m, c))
        return np.ascontiguousarray(g).reshape(x.shape)
    # route each window's gradient to its first maximum
    blocks = _pool_blocks(x, m).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // m, w // m, c, m * m)
    onehot = np.zeros_like(blocks)
    np.put_along_axis(onehot, blocks.argmax(axis=-1)[..., None], 1.0, axis=-1)
    g = onehot * grad_out[..., None]
    return np.ascontiguousarray(g.reshape(n, h // m, w // m, c, m, m).transpose(0, 1, 4, 2, 5, 3)).reshape(x.shape)


# --- blocks ------------------------------------------------------------------


class BlockKind(str, enum.Enum):
    STRIDED_CONV = "strided_conv"
    CONV_POOL = "conv_pool"
    CONV_RESIZE = "conv_resize"
    RESIZE_CONV = "resize_conv"

    @classmethod
    def parse(cls, text: str | BlockKind) -> BlockKind:
        if isinstance(text, BlockKind):
            return text
        key = text.strip().lower().replace("-", "_")
        if key == "strided":
            key = "strided_conv"
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown block kind {text!r}") from None

    @property
    def integer_only(self) -> bool:
        return self in (BlockKind.STRIDED_CONV, BlockKind.CONV_POOL)

    @property
    def cli_name(self) -> str:
        return {"strided_conv": "strided", "conv_pool": "conv-pool"}.get(self.value, self.value.replace("_", "-"))


def _integer_factor(kind: BlockKind, scale: Fraction) -> int:
    if scale.denominator != 1:
        raise ScaleError(f"{kind.value} needs an integer scale, got {format_scale(scale)}")
    return scale.numerator


def check_block_feasible(kind: BlockKind, scale: Fraction) -> None:
    if kind.integer_only:
        _integer_factor(kind, scale)


class _Stage1:
    """Resolution-changing first stage with cached state for backward."""

    def __init__(self, kind: BlockKind, scale: Fraction, resize_filter: FilterKind, pool: str):
        self.kind = kind
        self.scale = scale
        self.resize_filter = resize_filter
        self.pool = PoolLayer(pool, _integer_factor(kind, scale)) if kind is BlockKind.CONV_POOL else None  # type: ignore[arg-type]
        self.stride = _integer_factor(kind, scale) if kind is BlockKind.STRIDED_CONV else 1

    def forward(self, x: np.ndarray, layer: ConvLayer):
        n, h, w, _ = x.shape
        oh, ow = scaled_dims(h, w, self.scale, "down")
        kind = self.kind
        if kind is BlockKind.RESIZE_CONV:
            r = resize_forward(x, self.resize_filter, oh, ow)
            y, cols = _conv_forward(r, layer)
            return y, (cols, r.shape)
        y, cols = _conv_forward(x, layer)
        state = (cols, x.shape, y)
        if kind is BlockKind.CONV_RESIZE:
            y = resize_forward(y, self.resize_filter, oh, ow)
        elif kind is BlockKind.CONV_POOL:
            y = pool_forward(y, self.pool)
        return y, state

    def backward(self, state, layer: ConvLayer, grad: np.ndarray):
        kind = self.kind
        if kind is BlockKind.RESIZE_CONV:
            cols, r_shape = state
            return _conv_backward(cols, r_shape, layer, grad, need_input_grad=False)[1:]
        cols, x_shape, conv_out = state
        if kind is BlockKind.CONV_RESIZE:
            grad = resize_backward(grad, self.resize_filter, conv_out.shape[1], conv_out.shape[2])
        elif kind is BlockKind.CONV_POOL:
            grad = pool_backward(conv_out, self.pool, grad)
        return _conv_backward(cols, x_shape, layer, grad, need_input_grad=False)[1:]


def block_forward(
    x: np.ndarray,
    kind: BlockKind | str,
    layer: ConvLayer,
    scale: Fraction | str,
    resize_filter: FilterKind = BILINEAR,
    pool: Literal["max", "average"] = "average",
) -> np.ndarray:
    """Apply one resolution-changing block; output is ``(H / M, W / M)``.

    For ``strided_conv`` the layer's own stride is ignored and M is used.
    """
    check_tensor(x)
    kind = BlockKind.parse(kind)
    scale = check_downscale(parse_scale(scale))
    stage = _Stage1(kind, scale, resize_filter, pool)
    if stage.stride != layer.stride:
        layer = dataclasses.replace(layer, stride=stage.stride)
    return stage.forward(x, layer)[0]


# --- CNN-CR ------------------------------------------------------------------


@dataclasses.dataclass
class Network:
    """CNN-CR: a residual CNN added to a bicubic-downsampled copy of the input.

    ``convs[0]`` sits inside the resolution-changing first block; every conv
    except the last is followed by a ReLU.
    """

    scale: Fraction
    block: BlockKind
    convs: list[ConvLayer]
    seed: int = 0
    resize_filter: FilterKind = BILINEAR
    skip_filter: FilterKind = BICUBIC
    pool: Literal["max", "average"] = "average"
    iteration: int = 0
    _cache: dict | None = dataclasses.field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.scale = check_downscale(parse_scale(self.scale))
        self.block = BlockKind.parse(self.block)
        check_block_feasible(self.block, self.scale)
        if len(self.convs) < 2:
            raise ValueError("network needs at least two conv stages")
        self._stage1 = _Stage1(self.block, self.scale, self.resize_filter, self.pool)
        self.convs[0].stride = self._stage1.stride

    @property
    def num_stages(self) -> int:
        return len(self.convs)

    def parameters(self) -> list[np.ndarray]:
        """Weights and biases in stage order: ``[w1, b1, w2, b2, ...]``."""
        out = []
        for layer in self.convs:
            out.extend((layer.weight, layer.bias))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def output_dims(self, h: int, w: int) -> tuple[int, int]:
        return scaled_dims(h, w, self.scale, "down")


def build_cnncr(
    scale: Fraction | str,
    kind: BlockKind | str = BlockKind.CONV_RESIZE,
    rng_seed: int = 0,
    stages: int = 10,
    width: int = 64,
    resize_filter: FilterKind = BILINEAR,
    pool: Literal["max", "average"] = "average",
) -> Network:
    """Build a freshly initialised CNN-CR.

    Stages 1..n-1 get He-normal weights; the final 3-channel stage and all
    biases start at zero, so the untrained network reproduces bicubic
    downsampling exactly.
    """
    scale = check_downscale(parse_scale(scale))
    kind = BlockKind.parse(kind)
    check_block_feasible(kind, scale)
    rng = np.random.default_rng(rng_seed)
    convs = [ConvLayer.he_normal(3, width, rng)]
    for _ in range(stages - 2):
        convs.append(ConvLayer.he_normal(width, width, rng))
    convs.append(ConvLayer.zeros(width, 3))
    return Network(scale, kind, convs, seed=rng_seed, resize_filter=resize_filter, pool=pool)


def network_forward(net: Network, x: np.ndarray, keep_intermediates: bool = False) -> np.ndarray:
    """Downsample an RGB batch ``(n, H, W, 3)`` to ``(n, H/M, W/M, 3)``."""
    check_tensor(x)
    if x.shape[3] != 3:
        raise ShapeError(f"network expects 3 input channels, got {x.shape[3]}")
    oh, ow = net.output_dims(x.shape[1], x.shape[2])

    states = []
    masks = []
    y, st = net._stage1.forward(x, net.convs[0])
    states.append(st)
    for layer in net.convs[1:]:
        mask = y > 0
        y = y * mask
        masks.append(mask)
        y, cols = _conv_forward(y, layer)
        states.append((cols, masks[-1].shape))
    skip = resize_forward(x, net.skip_filter, oh, ow)
    out = y + skip
    net._cache = {"states": states, "masks": masks} if keep_intermediates else None
    return out


def network_backward(net: Network, grad_out: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients, ordered like :meth:`Network.parameters`.

    Requires a preceding ``network_forward(..., keep_intermediates=True)``;
    the cached state is consumed.  Raises ``FloatingPointError`` if the
    gradient overflows on its way back.
    """
    if net._cache is None:
        raise StateError("network_backward needs a forward pass with keep_intermediates=True")
    check_tensor(grad_out, "grad_out")
    states, masks = net._cache["states"], net._cache["masks"]
    net._cache = None

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * net.num_stages  # type: ignore[list-item]
    g = grad_out
    for i in range(net.num_stages - 1, 0, -1):
        cols, x_shape = states[i]
        g, gw, gb = _conv_backward(cols, x_shape, net.convs[i], g)
        grads[i] = (gw, gb)
        g = g * masks[i - 1]
    if not np.isfinite(g).all():
        raise FloatingPointError("gradient overflowed during backpropagation")
    grads[0] = net._stage1.backward(states[0], net.convs[0], g)
    return [arr for pair in grads for arr in pair]


# --- checkpoints -------------------------------------------------------------

MAGIC = b"CNNCRCK1"


def save_checkpoint(net: Network, path: str | Path) -> None:
    """Write ``net`` to ``path`` (layout documented in README.md)."""
    header = {
        "arch": "cnn-cr",
        "stages": net.num_stages,
        "scale": format_scale(net.scale),
        "block": net.block.value,
        "seed": net.seed,
        "iteration": net.iteration,
        "resize_filter": net.resize_filter.tag,
        "antialias": net.resize_filter.antialias,
        "pool": net.pool,
        "layers": [{"in": c.in_ch, "out": c.out_ch, "stride": c.stride} for c in net.convs],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in net.parameters():
            fh.write(p.astype("<f4").tobytes(order="C"))


def load_checkpoint(path: str | Path) -> Network:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise MediaFormatError(f"{path}: not a CNN-CR checkpoint")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    convs = []
    for entry in header["layers"]:
        shapes = [(KSIZE, KSIZE, entry["in"], entry["out"]), (entry["out"],)]
        arrays = []
        for shape in shapes:
            count = math.prod(shape)
            chunk = data[offset : offset + 4 * count]
            if len(chunk) != 4 * count:
                raise MediaFormatError(f"{path}: truncated parameter payload")
            arrays.append(np.frombuffer(chunk, dtype="<f4").astype(DTYPE).reshape(shape))
            offset += 4 * count
        convs.append(ConvLayer(arrays[0], arrays[1], entry["stride"]))
    if offset != len(data):
        raise MediaFormatError(f"{path}: {len(data) - offset} trailing bytes after parameters")
    return Network(
        Fraction(header["scale"]),
        BlockKind.parse(header["block"]),
        convs,
        seed=header["seed"],
        resize_filter=FilterKind(header["resize_filter"], header["antialias"]),
        pool=header["pool"],
        iteration=header["iteration"],
    )


def bicubic_downsample(x: np.ndarray, scale: Fraction | str) -> np.ndarray:
    """The network's skip path on its own: bicubic downscale by ``scale``."""
    return resize_by_scale(x, BICUBIC, scale, "down")
