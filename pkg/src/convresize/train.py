"""End-to-end training of a downsampling network.

Per iteration: random crops -> network downsample -> fixed bicubic
upsample back to crop size -> MSE against the crops -> backprop -> Adam.
No codec sits in the differentiable path.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ScaleError, ShapeError, TrainingError
from .nn import BlockKind, Network, build_cnncr, check_block_feasible, network_backward, network_forward, save_checkpoint
from .resample import BICUBIC, FilterKind, resize_backward, resize_forward
from .tensor import DTYPE, check_downscale, check_tensor, format_scale, parse_scale

log = logging.getLogger(__name__)


@dataclasses.dataclass
class TrainConfig:
    scale: Fraction = Fraction(2)
    block: BlockKind = BlockKind.CONV_RESIZE
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    iterations: int = 500_000
    crop_base: int = 256
    seed: int = 0
    upsampler: FilterKind = BICUBIC
    stages: int = 10

    def __post_init__(self):
        self.scale = check_downscale(parse_scale(self.scale))
        self.block = BlockKind.parse(self.block)
        check_block_feasible(self.block, self.scale)
        if isinstance(self.upsampler, str):
            self.upsampler = FilterKind.parse(self.upsampler)
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    @property
    def crop(self) -> int:
        return crop_size(self.scale, self.crop_base)

    def to_text(self) -> str:
        """Serialise as ``key=value`` lines."""
        values = {
            "scale": format_scale(self.scale),
            "block": self.block.value,
            "batch_size": self.batch_size,
            "lr": repr(self.lr),
            "beta1": repr(self.beta1),
            "beta2": repr(self.beta2),
            "epsilon": repr(self.epsilon),
            "iterations": self.iterations,
            "crop_base": self.crop_base,
            "seed": self.seed,
            "upsampler": self.upsampler.tag + ("" if self.upsampler.antialias else "-noaa"),
            "stages": self.stages,
        }
        return "".join(f"{k}={v}\n" for k, v in values.items())

    @classmethod
    def from_text(cls, text: str) -> TrainConfig:
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
            raw[key.strip()] = value.strip()
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(raw) - set(fields)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            if key in ("batch_size", "iterations", "crop_base", "seed", "stages"):
                kwargs[key] = int(value)
            elif key in ("lr", "beta1", "beta2", "epsilon"):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> TrainConfig:
        return cls.from_text(Path(path).read_text())


def crop_size(scale: Fraction | str, base: int = 256) -> int:
    """Largest training crop ``M * k <= base`` that downsamples exactly.

    ``k = floor(base / M)``, rounded down to a multiple of M's denominator
    so that ``M * k`` is a whole number of pixels.  For base 256 this is
    plain ``M * floor(256 / M)`` at every common M.
    """
    scale = parse_scale(scale)
    p, q = scale.numerator, scale.denominator
    k = (base * q) // p
    k -= k % q
    if k < 1:
        raise ScaleError(f"scale {format_scale(scale)} is too large for crop base {base}")
    return k * p // q


@dataclasses.dataclass
class LossValue:
    value: float
    grad: np.ndarray  # d loss / d x_hat


def mse_loss(x: np.ndarray, x_hat: np.ndarray) -> LossValue:
    """Mean squared error and its gradient with respect to ``x_hat``."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    diff = x_hat.astype(np.float64) - x.astype(np.float64)
    n = diff.size
    value = float(np.dot(diff.ravel(), diff.ravel()) / n)
    return LossValue(value, (diff * (2.0 / n)).astype(DTYPE))


@dataclasses.dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("params, grads and optimizer state have different lengths")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeError(f"shape mismatch in Adam step: param {p.shape}, grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)).astype(p.dtype)
    return state


def _as_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 4 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"dataset images must be (H, W, 3), got {img.shape}")
    return img


def sample_batch(dataset: Sequence[np.ndarray], cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Random square crops, drawn with replacement over images and positions."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    c = cfg.crop
    batch = np.empty((cfg.batch_size, c, c, 3), DTYPE)
    for i in range(cfg.batch_size):
        img = _as_image(dataset[int(rng.integers(len(dataset)))])
        h, w = img.shape[:2]
        if h < c or w < c:
            raise ShapeError(f"image {h}x{w} is smaller than the {c}x{c} crop")
        top = int(rng.integers(h - c + 1))
        left = int(rng.integers(w - c + 1))
        batch[i] = img[top : top + c, left : left + c]
    return batch


def reconstruct(net: Network, x: np.ndarray, upsampler: FilterKind = BICUBIC, keep_intermediates: bool = False):
    """Downsample with ``net`` and upsample back to ``x``'s size."""
    low = network_forward(net, x, keep_intermediates=keep_intermediates)
    return resize_forward(low, upsampler, x.shape[1], x.shape[2]), low


def training_step(net: Network, batch: np.ndarray, state: AdamState, cfg: TrainConfig) -> float:
    """Forward, loss, backward and one Adam update; returns the pre-update loss."""
    low = network_forward(net, batch, keep_intermediates=True)
    if not np.isfinite(low).all():
        net._cache = None
        raise TrainingError(f"network produced non-finite values at iteration {net.iteration}")
    x_hat = resize_forward(low, cfg.upsampler, batch.shape[1], batch.shape[2])
    loss = mse_loss(batch, x_hat)
    if not math.isfinite(loss.value):
        net._cache = None
        raise TrainingError(f"non-finite loss {loss.value} at iteration {net.iteration}")
    grads = None
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(loss.grad).all():
            grad_low = resize_backward(loss.grad, cfg.upsampler, low.shape[1], low.shape[2])
            if np.isfinite(grad_low).all():
                try:
                    grads = network_backward(net, grad_low)
                except FloatingPointError:
                    pass
    if grads is None or not all(np.isfinite(g).all() for g in grads):
        net._cache = None
        raise TrainingError(f"non-finite gradient at iteration {net.iteration}")
    adam_step(net.parameters(), grads, state, cfg)
    net.iteration += 1
    return loss.value


def train_loop(
    dataset: Sequence[np.ndarray],
    cfg: TrainConfig,
    report_every: int = 0,
    checkpoint: str | Path | None = None,
    net: Network | None = None,
    on_report: Callable[[int, float], None] | None = None,
) -> tuple[Network, list[tuple[int, float]]]:
    """Train a CNN-CR on random crops of ``dataset``.

    Returns the trained network and the loss history as
    ``(iteration, loss)`` pairs, where the loss at iteration ``i`` is
    measured before the ``i``-th update (so iteration 0 is the untrained
    bicubic baseline for a fresh network).
    """
    if net is None:
        net = build_cnncr(cfg.scale, cfg.block, cfg.seed, stages=cfg.stages)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros_like(net.parameters())
    history: list[tuple[int, float]] = []
    for it in range(cfg.iterations):
        batch = sample_batch(dataset, cfg, rng)
        loss = training_step(net, batch, state, cfg)
        history.append((it, loss))
        if report_every and (it + 1) % report_every == 0:
            log.info("iter %d loss %.6g", it, loss)
            if on_report is not None:
                on_report(it, loss)
            if checkpoint is not None:
                save_checkpoint(net, checkpoint)
    if checkpoint is not None:
        save_checkpoint(net, checkpoint)
    return net, history


def write_loss_history(history: Sequence[tuple[int, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        for it, loss in history:
            writer.writerow([it, repr(float(loss))])


def read_loss_history(path: str | Path) -> list[tuple[int, float]]:
    with open(path, newline="") as fh:
        return [(int(row["iteration"]), float(row["loss"])) for row in csv.DictReader(fh)]


def dataset_loss(net: Network, images: Sequence[np.ndarray], upsampler: FilterKind = BICUBIC) -> float:
    """Mean reconstruction MSE over equally sized images, in one batch."""
    x = check_tensor(np.stack([_as_image(im) for im in images]).astype(DTYPE))
    x_hat, _ = reconstruct(net, x, upsampler)
    return mse_loss(x, x_hat).value
