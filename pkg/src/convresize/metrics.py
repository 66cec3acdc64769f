"""Distortion metrics and Bjontegaard-delta bitrate."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.interpolate import PchipInterpolator

from .errors import CurveError, ShapeError

METRICS = ("psnr", "ssim", "vmaf")

# BT.709 luma weights
LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])


def luma(x: np.ndarray) -> np.ndarray:
    """BT.709 luma of an ``(..., 3)`` RGB array, as float64 ``(...)``."""
    return np.asarray(x, dtype=np.float64) @ LUMA_WEIGHTS


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    d = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the last two axes
    k = len(g)
    rows = sliding_window_view(img, k, axis=-2) @ g
    return sliding_window_view(rows, k, axis=-1) @ g


def _planes(x: np.ndarray) -> np.ndarray:
    """Reduce an input to a stack of 2-D luma planes ``(n, H, W)``."""
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None].astype(np.float64)
    if x.ndim == 4:
        if x.shape[3] == 3:
            return luma(x)
        if x.shape[3] == 1:
            return x[..., 0].astype(np.float64)
    raise ShapeError(f"ssim expects (H, W) planes or (n, H, W, 1|3) tensors, got {x.shape}")


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, window: int = 11, sigma: float = 1.5):
    """Local SSIM values over all fully-covered window positions."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    x, y = _planes(a), _planes(b)
    if x.shape[1] < window or x.shape[2] < window:
        raise ShapeError(f"image {x.shape[1]}x{x.shape[2]} is smaller than the {window}x{window} SSIM window")
    g = _gaussian_window(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x * mu_x
    syy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03).

    RGB inputs are reduced to BT.709 luma first.  ``data_range`` is the
    signal's dynamic range: 1.0 for [0, 1] tensors, 255 for 8-bit planes.
    """
    return float(np.mean(ssim_map(a, b, data_range)))


# --- rate-quality curves -----------------------------------------------------


@dataclasses.dataclass(frozen=True)
class RateQualityCurve:
    """Bitrate (kbps) vs quality points of one encode ladder, sorted by bitrate."""

    bitrates: tuple[float, ...]
    qualities: tuple[float, ...]
    metric: str = "psnr"

    def __post_init__(self):
        if len(self.bitrates) != len(self.qualities):
            raise CurveError("bitrates and qualities differ in length")
        if len(self.bitrates) < 4:
            raise CurveError(f"need at least 4 rate-quality points, got {len(self.bitrates)}")
        if any(not (r > 0) for r in self.bitrates):
            raise CurveError("bitrates must be strictly positive")
        if any(not math.isfinite(q) for q in self.qualities):
            raise CurveError(f"non-finite {self.metric} quality in curve")
        order = sorted(range(len(self.bitrates)), key=lambda i: self.bitrates[i])
        object.__setattr__(self, "bitrates", tuple(float(self.bitrates[i]) for i in order))
        object.__setattr__(self, "qualities", tuple(float(self.qualities[i]) for i in order))

    @classmethod
    def from_points(cls, points: Iterable[tuple[float, float]], metric: str = "psnr") -> RateQualityCurve:
        pts = list(points)
        return cls(tuple(p[0] for p in pts), tuple(p[1] for p in pts), metric)

    def violations(self) -> list[str]:
        """Places where quality drops as bitrate rises (flagged, never fixed)."""
        out = []
        for i in range(1, len(self.bitrates)):
            if self.qualities[i] < self.qualities[i - 1]:
                out.append(
                    f"{self.metric} falls from {self.qualities[i - 1]:.4f} to {self.qualities[i]:.4f} "
                    f"as bitrate rises to {self.bitrates[i]:.3f} kbps"
                )
        return out

    def scaled(self, factor: float) -> RateQualityCurve:
        return RateQualityCurve(tuple(r * factor for r in self.bitrates), self.qualities, self.metric)


def _log_rate_integral(curve: RateQualityCurve, lo: float, hi: float, fit: str) -> float:
    q = np.array(curve.qualities)
    lr = np.log10(np.array(curve.bitrates))
    order = np.argsort(q, kind="stable")
    q, lr = q[order], lr[order]
    if fit == "pchip":
        if np.any(np.diff(q) <= 0):
            raise CurveError(f"{curve.metric} values must be distinct for interpolation (degenerate curve)")
        return float(PchipInterpolator(q, lr).integrate(lo, hi))
    if fit == "cubic":
        if np.ptp(q) == 0:
            raise CurveError(f"{curve.metric} values are all equal (degenerate curve)")
        poly = np.polyint(np.polyfit(q, lr, 3))
        return float(np.polyval(poly, hi) - np.polyval(poly, lo))
    raise ValueError(f"fit must be 'pchip' or 'cubic', got {fit!r}")


def bd_rate(reference: RateQualityCurve, test: RateQualityCurve, fit: Literal["pchip", "cubic"] = "pchip") -> float:
    """Average bitrate change of ``test`` vs ``reference`` at equal quality, in %.

    Log-bitrate is modelled as a function of quality (monotone piecewise
    cubic by default, or a least-squares cubic polynomial with
    ``fit="cubic"``) and integrated over the overlapping quality interval.
    Negative values mean ``test`` needs less bitrate.
    """
    lo = max(min(reference.qualities), min(test.qualities))
    hi = min(max(reference.qualities), max(test.qualities))
    if not hi > lo:
        raise CurveError(f"curves share no {reference.metric} range (overlap [{lo:.4f}, {hi:.4f}])")
    ref_int = _log_rate_integral(reference, lo, hi, fit)
    test_int = _log_rate_integral(test, lo, hi, fit)
    avg = (test_int - ref_int) / (hi - lo)
    return (10.0**avg - 1.0) * 100.0


# --- ladder CSV --------------------------------------------------------------

CURVE_COLUMNS = ("qp", "bitrate_kbps", "psnr", "ssim", "vmaf")


@dataclasses.dataclass
class RDPoint:
    """One encode of the ladder: rate and every measured quality."""

    qp: int
    bitrate_kbps: float
    psnr: float | None = None
    ssim: float | None = None
    vmaf: float | None = None

    def quality(self, metric: str) -> float | None:
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}")
        return getattr(self, metric)


def curve_from_points(points: Sequence[RDPoint], metric: str) -> RateQualityCurve:
    """Project ladder points onto one metric."""
    pairs = []
    for p in points:
        q = p.quality(metric)
        if q is None:
            raise CurveError(f"QP {p.qp} has no {metric} score")
        pairs.append((p.bitrate_kbps, q))
    return RateQualityCurve.from_points(pairs, metric)


def _fmt(v: float | None, digits: int) -> str:
    if v is None:
        return ""
    if math.isinf(v):
        return "inf"
    return f"{v:.{digits}f}"


def format_points_csv(points: Sequence[RDPoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    for p in sorted(points, key=lambda p: p.qp):
        writer.writerow([p.qp, _fmt(p.bitrate_kbps, 3), _fmt(p.psnr, 4), _fmt(p.ssim, 6), _fmt(p.vmaf, 4)])
    return buf.getvalue()


def write_points_csv(points: Sequence[RDPoint], path: str | Path) -> None:
    Path(path).write_text(format_points_csv(points))


def read_points_csv(path: str | Path) -> list[RDPoint]:
    def opt(v: str | None) -> float | None:
        return float(v) if v not in (None, "") else None

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"qp", "bitrate_kbps"} - set(reader.fieldnames or ())
        if missing:
            raise CurveError(f"{path}: missing columns {sorted(missing)}")
        return [
            RDPoint(int(row["qp"]), float(row["bitrate_kbps"]), opt(row.get("psnr")), opt(row.get("ssim")), opt(row.get("vmaf")))
            for row in reader
        ]
