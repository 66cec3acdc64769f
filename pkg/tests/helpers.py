"""Oracles and test data shared across the test-suite."""

from __future__ import annotations

import shlex
import sys
from pathlib import Path

import numpy as np

from convresize.nn import BlockKind, Network
from convresize.resample import BICUBIC, build_resample_matrix

# encoder / decoder templates for the stand-in codec in mock_codec.py
CODEC = f"{shlex.quote(sys.executable)} {shlex.quote(str(Path(__file__).with_name('mock_codec.py')))}"
ENC = CODEC + " encode {input} {output} {qp}"
DEC = CODEC + " decode {input} {output}"


def synthetic_image(h: int, w: int, seed: int = 1) -> np.ndarray:
    """Deterministic RGB test picture in [0, 1]: oriented gratings plus discs."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w, 3))
    for _ in range(12):
        f = rng.uniform(0.05, 0.45)
        th = rng.uniform(0, np.pi)
        ph = rng.uniform(0, 2 * np.pi)
        col = rng.uniform(-1, 1, 3)
        img += 0.08 * col * np.sin(2 * np.pi * f * (xx * np.cos(th) + yy * np.sin(th)) + ph)[..., None]
    for _ in range(15):
        cy, cx, r = rng.uniform(0, h), rng.uniform(0, w), rng.uniform(3, 15)
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2) < r * r
        img[mask] += rng.uniform(-0.3, 0.3, 3)
    return np.clip(img + 0.5, 0, 1).astype(np.float32)


def fixed_crops(img: np.ndarray, size: int, count: int = 8, seed: int = 5) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    h, w = img.shape[:2]
    tops = rng.integers(0, h - size + 1, count)
    lefts = rng.integers(0, w - size + 1, count)
    return [np.ascontiguousarray(img[t : t + size, l : l + size]) for t, l in zip(tops, lefts)]


def randomize_head(net: Network, seed: int = 0, scale: float = 0.05) -> None:
    """Give the zero-initialised last layer and the biases random values.

    A fresh CNN-CR has a zero final layer, which makes every other
    gradient exactly zero; gradient checks need a generic point.
    """
    rng = np.random.default_rng(seed)
    last = net.convs[-1]
    last.weight[:] = rng.standard_normal(last.weight.shape) * scale
    for layer in net.convs:
        layer.bias[:] = rng.standard_normal(layer.bias.shape) * scale


def _cols(x: np.ndarray, stride: int) -> np.ndarray:
    """3x3 patches by explicit shifts, ordered (kh, kw, c) like the weights."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    oh, ow = -(-h // stride), -(-w // stride)
    out = np.empty((n, oh, ow, 3, 3, c), x.dtype)
    for kh in range(3):
        for kw in range(3):
            out[:, :, :, kh, kw] = xp[:, kh : kh + stride * oh : stride, kw : kw + stride * ow : stride]
    return out.reshape(n, oh, ow, 9 * c)


def _resize64(x: np.ndarray, filt, oh: int, ow: int) -> np.ndarray:
    rh = build_resample_matrix(filt, x.shape[1], oh).to_dense()
    rw = build_resample_matrix(filt, x.shape[2], ow).to_dense()
    y = np.matmul(rh, x.transpose(0, 3, 1, 2))  # (n, c, oh, w)
    return np.matmul(y, rw.T).transpose(0, 2, 3, 1)


def _conv64(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 'same' 3x3 conv as a sum of nine shifted matrix products."""
    n, h, w, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, w, weight.shape[3])) + bias
    for kh in range(3):
        for kw in range(3):
            out += xp[:, kh : kh + h, kw : kw + w] @ weight[kh, kw].astype(np.float64)
    return out


def fd_gradients(net: Network, x: np.ndarray, h: float = 1e-3, chunk: int = 256) -> list[np.ndarray]:
    """Central finite differences of the bicubic-up MSE training loss, in float64.

    The network is re-evaluated with its own float64 conv (explicit patch
    columns) and dense resampling matrices, so no package forward or
    backward code is involved.  A perturbation of one weight of stage k
    shifts that stage's conv output by ``+-h`` times the matching input
    patch column (convolution is linear in its weights), so many
    perturbations run at once as a batch through the rest of the network.
    Supports conv_resize and resize_conv first stages.
    """
    if net.block not in (BlockKind.CONV_RESIZE, BlockKind.RESIZE_CONV):
        raise NotImplementedError(net.block)
    x = np.asarray(x, np.float64)
    n, H, W, _ = x.shape
    assert n == 1
    oh, ow = net.output_dims(H, W)
    skip = _resize64(x, BICUBIC, oh, ow)
    params = [(c.weight.astype(np.float64), c.bias.astype(np.float64)) for c in net.convs]

    # stage inputs of the unperturbed network
    stage_in = []
    if net.block is BlockKind.CONV_RESIZE:
        stage_in.append(x)
        z = np.maximum(_resize64(_conv64(x, *params[0]), net.resize_filter, oh, ow), 0)
    else:
        r = _resize64(x, net.resize_filter, oh, ow)
        stage_in.append(r)
        z = np.maximum(_conv64(r, *params[0]), 0)
    for p in params[1:]:
        stage_in.append(z)
        z = np.maximum(_conv64(z, *p), 0)

    def tail(k: int, pre: np.ndarray) -> np.ndarray:
        """Per-sample losses continuing from stage k's conv output."""
        if k == 0 and net.block is BlockKind.CONV_RESIZE:
            pre = _resize64(pre, net.resize_filter, oh, ow)
        y = pre
        for p in params[k + 1 :]:
            y = _conv64(np.maximum(y, 0), *p)
        d = _resize64(y + skip, BICUBIC, H, W) - x
        return (d * d).reshape(len(d), -1).mean(axis=1)

    grads = []
    for k, (weight, bias) in enumerate(params):
        base = _conv64(stage_in[k], weight, bias)
        cols = _cols(stage_in[k], 1)[0]  # (oh, ow, 9 * cin)
        out_ch = weight.shape[3]
        nw = weight.size
        flat = np.empty(nw + out_ch)
        # flat index i < nw -> (patch row, out channel) as in weight.reshape(-1, out); then biases
        for start in range(0, nw + out_ch, chunk):
            idx = range(start, min(start + chunk, nw + out_ch))
            delta = np.zeros((len(idx),) + base.shape[1:])
            for b, i in enumerate(idx):
                if i < nw:
                    row, co = divmod(i, out_ch)
                    delta[b, :, :, co] = cols[:, :, row]
                else:
                    delta[b, :, :, i - nw] = 1.0
            flat[idx.start : idx.stop] = (tail(k, base + h * delta) - tail(k, base - h * delta)) / (2 * h)
        grads += [flat[:nw].reshape(weight.shape), flat[nw:]]
    return grads


def analytic_gradients(net: Network, x: np.ndarray) -> list[np.ndarray]:
    from convresize.nn import network_backward
    from convresize.resample import resize_backward
    from convresize.train import mse_loss, reconstruct

    x_hat, low = reconstruct(net, x, BICUBIC, keep_intermediates=True)
    loss = mse_loss(x, x_hat)
    return network_backward(net, resize_backward(loss.grad, BICUBIC, low.shape[1], low.shape[2]))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)`` over a whole parameter tensor."""
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def brute_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    """Direct nested-loop 'same' 3x3 cross-correlation in float64."""
    n, h, w, c = x.shape
    co = weight.shape[3]
    oh, ow = -(-h // stride), -(-w // stride)
    out = np.zeros((n, oh, ow, co))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for kh in range(3):
                    for kw in range(3):
                        yi, xj = i * stride + kh - 1, j * stride + kw - 1
                        if 0 <= yi < h and 0 <= xj < w:
                            out[b, i, j] += x[b, yi, xj].astype(np.float64) @ weight[kh, kw].astype(np.float64)
                out[b, i, j] += bias
    return out

