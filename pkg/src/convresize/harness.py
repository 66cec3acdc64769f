"""Rate-quality evaluation of downsamplers inside an encode ladder.

For every scale and QP: downsample the RGB source, convert to 4:2:0,
encode and decode with external commands (or copy the frames verbatim in
no-encoder mode), convert back to RGB, upsample to the source size and
score against the source.  Scores are computed on BT.709 luma in [0, 1].
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import io
import csv
import logging
import shlex
import shutil
import subprocess
import tempfile
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import CurveError, EncoderError, ShapeError
from .media import FramePlanar420, Y4MVideo, read_y4m_video, read_yuv, rgb_to_yuv420, write_y4m, yuv420_to_rgb
from .metrics import METRICS, RDPoint, bd_rate, curve_from_points, luma, psnr, ssim
from .nn import BlockKind, Network, load_checkpoint, network_forward
from .resample import BICUBIC, FilterKind, resize_by_scale, resize_forward
from .tensor import DTYPE, check_downscale, format_scale, parse_scale
from .train import TrainConfig, dataset_loss, train_loop

log = logging.getLogger(__name__)


def even_qp_ladder(lo: int = 17, hi: int = 46, count: int = 15) -> tuple[int, ...]:
    """``count`` QPs evenly spaced over ``[lo, hi]``, rounded half up."""
    step = Fraction(hi - lo, count - 1)
    return tuple(int(lo + k * step + Fraction(1, 2)) for k in range(count))


DEFAULT_QPS = even_qp_ladder()

Downsampler = Callable[[np.ndarray], np.ndarray]


@dataclasses.dataclass
class LadderConfig:
    """Encode-ladder settings.

    ``encoder_cmd`` / ``decoder_cmd`` are templates with ``{input}``,
    ``{output}``, ``{qp}``, ``{width}`` and ``{height}`` placeholders.  The
    encoder reads a Y4M file and writes a bitstream; the decoder reads the
    bitstream and writes ``{output}`` as Y4M, or as raw I420 when
    ``decoded_format`` is ``"yuv"``.
    With ``encoder_cmd=None`` frames are passed through untouched and the
    rate is the raw 4:2:0 size.
    """

    scales: list[Fraction] = dataclasses.field(default_factory=lambda: [Fraction(2)])
    qp_list: tuple[int, ...] = DEFAULT_QPS
    encoder_cmd: str | None = None
    decoder_cmd: str | None = None
    upsampler: FilterKind = BICUBIC
    metrics: tuple[str, ...] = ("psnr", "ssim")
    vmaf_scores: Mapping[tuple[Fraction, int], float] | None = None
    max_jobs: int = 1
    decoded_format: str = "y4m"

    def __post_init__(self):
        self.scales = [check_downscale(parse_scale(s)) for s in self.scales]
        self.qp_list = tuple(int(q) for q in self.qp_list)
        if any(b <= a for a, b in zip(self.qp_list, self.qp_list[1:])):
            raise ValueError(f"qp_list must be strictly increasing, got {self.qp_list}")
        if not self.qp_list:
            raise ValueError("qp_list is empty")
        if isinstance(self.upsampler, str):
            self.upsampler = FilterKind.parse(self.upsampler)
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ValueError(f"unknown metrics {sorted(unknown)}")
        if "vmaf" in self.metrics and self.vmaf_scores is None:
            raise ValueError("vmaf requested but no external VMAF scores supplied")
        if self.encoder_cmd is not None and self.decoder_cmd is None:
            raise ValueError("an encoder command needs a matching decoder command")
        if self.max_jobs < 1:
            raise ValueError("max_jobs must be >= 1")
        if self.decoded_format not in ("y4m", "yuv"):
            raise ValueError(f"decoded_format must be 'y4m' or 'yuv', got {self.decoded_format!r}")

    @property
    def no_encoder(self) -> bool:
        return self.encoder_cmd is None


@dataclasses.dataclass
class EncodeResult:
    qp: int
    bitstream_bytes: int
    duration_s: float
    decoded_path: Path

    @property
    def bitrate_kbps(self) -> float:
        rate = 8.0 * self.bitstream_bytes / self.duration_s / 1000.0
        if not rate > 0:
            raise EncoderError(f"QP {self.qp}: non-positive bitrate ({self.bitstream_bytes} bytes)")
        return rate


@dataclasses.dataclass
class LadderResult:
    scale: Fraction
    points: list[RDPoint]
    flags: list[str] = dataclasses.field(default_factory=list)


# --- downsamplers --------------------------------------------------------------


def filter_downsampler(filt: FilterKind, scale: Fraction) -> Downsampler:
    def down(x: np.ndarray) -> np.ndarray:
        return resize_by_scale(x, filt, scale, "down")

    return down


def network_downsampler(net: Network) -> Downsampler:
    def down(x: np.ndarray) -> np.ndarray:
        return network_forward(net, x)

    return down


def make_downsampler(method: str | Network, scale: Fraction) -> Downsampler:
    """``"lanczos"``, ``"bicubic"``, ``"bilinear"``, ``"ckpt:PATH"`` or a Network."""
    scale = parse_scale(scale)
    if isinstance(method, Network):
        net = method
    elif method.startswith("ckpt:"):
        net = load_checkpoint(method[len("ckpt:") :])
    else:
        return filter_downsampler(FilterKind.parse(method), scale)
    if net.scale != scale:
        raise ShapeError(f"checkpoint was trained for scale {format_scale(net.scale)}, not {format_scale(scale)}")
    return network_downsampler(net)


# --- external codec ------------------------------------------------------------


def _run(template: str, **fields) -> None:
    cmd = template.format(**{k: str(v) for k, v in fields.items()})
    argv = shlex.split(cmd)
    log.info("running: %s", cmd)
    try:
        proc = subprocess.run(argv, capture_output=True, text=True)
    except OSError as exc:
        raise EncoderError(f"cannot start {argv[0]!r}: {exc}", cmd=cmd) from exc
    log.info("exit %d: %s", proc.returncode, cmd)
    if proc.stderr:
        log.info("stderr: %s", proc.stderr.strip())
    if proc.returncode != 0:
        raise EncoderError(
            f"command failed with exit status {proc.returncode}: {cmd}\n{proc.stderr.strip()}",
            cmd=cmd,
            returncode=proc.returncode,
            stderr=proc.stderr,
        )


def encode_decode(cfg: LadderConfig, src: Path, qp: int, width: int, height: int, duration_s: float, work: Path) -> EncodeResult:
    """Run one ladder point through the codec and return its decoded file."""
    if cfg.no_encoder:
        decoded = work / f"decoded_qp{qp}.y4m"
        shutil.copyfile(src, decoded)
        raw_bytes = len(read_y4m_video(decoded).frames) * width * height * 3 // 2
        return EncodeResult(qp, raw_bytes, duration_s, decoded)
    bitstream = work / f"qp{qp}.bin"
    decoded = work / f"decoded_qp{qp}.{cfg.decoded_format}"
    common = dict(qp=qp, width=width, height=height)
    _run(cfg.encoder_cmd, input=src, output=bitstream, **common)
    if not bitstream.exists() or bitstream.stat().st_size == 0:
        raise EncoderError(f"encoder produced no bitstream for QP {qp}", cmd=cfg.encoder_cmd)
    _run(cfg.decoder_cmd, input=bitstream, output=decoded, **common)
    if not decoded.exists():
        raise EncoderError(f"decoder produced no output for QP {qp}", cmd=cfg.decoder_cmd)
    return EncodeResult(qp, bitstream.stat().st_size, duration_s, decoded)


def _read_decoded(path: Path, width: int, height: int) -> list[FramePlanar420]:
    if path.suffix == ".yuv":
        return read_yuv(path, width, height)
    return read_y4m_video(path).frames


# --- scoring -------------------------------------------------------------------


def score_frames(sources: Sequence[np.ndarray], recons: Sequence[np.ndarray], metrics: Sequence[str]) -> dict[str, float]:
    """Luma PSNR (from the pooled MSE over frames) and mean luma SSIM."""
    if len(sources) != len(recons):
        raise ShapeError(f"{len(sources)} source frames vs {len(recons)} reconstructed frames")
    out = {}
    ys = np.stack([luma(s[0]) for s in sources])
    yr = np.stack([luma(r[0]) for r in recons])
    if "psnr" in metrics:
        out["psnr"] = psnr(ys, yr, 1.0)
    if "ssim" in metrics:
        out["ssim"] = float(np.mean([ssim(a, b, 1.0) for a, b in zip(ys, yr)]))
    return out


def run_ladder(
    video: Y4MVideo | Sequence[np.ndarray],
    downsampler: str | Network | Mapping[Fraction, Downsampler],
    cfg: LadderConfig,
    work_dir: str | Path | None = None,
    fps: Fraction = Fraction(30),
) -> dict[Fraction, LadderResult]:
    """Evaluate one downsampling method across ``cfg.scales`` x ``cfg.qp_list``.

    Args:
        video: a Y4M video, or RGB source frames ``(1, H, W, 3)``.
        downsampler: method name / ``ckpt:PATH`` / Network, or an explicit
            mapping from scale to downsampling callable.
        cfg: ladder settings.
        work_dir: where intermediate files go; a temp dir by default.
    """
    if isinstance(video, Y4MVideo):
        sources = [yuv420_to_rgb(f) for f in video.frames]
        fps = video.fps
    else:
        sources = [np.asarray(f, dtype=DTYPE) for f in video]
    if not sources:
        raise ValueError("no source frames")
    duration = float(len(sources) / fps)
    src_h, src_w = sources[0].shape[1:3]

    results = {}
    with tempfile.TemporaryDirectory(dir=work_dir) as tmp:
        for scale in cfg.scales:
            if isinstance(downsampler, Mapping):
                down = downsampler[scale]
            else:
                down = make_downsampler(downsampler, scale)
            lows = [down(s) for s in sources]
            low_h, low_w = lows[0].shape[1:3]
            if low_h % 2 or low_w % 2:
                raise ShapeError(f"downscaled size {low_w}x{low_h} at M={format_scale(scale)} is not even; 4:2:0 needs even dims")
            work = Path(tmp) / f"M{scale.numerator}-{scale.denominator}"
            work.mkdir()
            src_path = work / "down.y4m"
            write_y4m(src_path, [rgb_to_yuv420(low) for low in lows], fps)

            def point(qp: int) -> RDPoint:
                enc = encode_decode(cfg, src_path, qp, low_w, low_h, duration, work)
                decoded = _read_decoded(enc.decoded_path, low_w, low_h)
                if len(decoded) != len(sources) or (decoded[0].width, decoded[0].height) != (low_w, low_h):
                    raise ShapeError(f"QP {qp}: decoder returned {len(decoded)} frames of {decoded[0].width}x{decoded[0].height}")
                recons = [resize_forward(yuv420_to_rgb(f), cfg.upsampler, src_h, src_w) for f in decoded]
                scores = score_frames(sources, recons, cfg.metrics)
                if "vmaf" in cfg.metrics:
                    key = (scale, qp)
                    if key not in cfg.vmaf_scores:
                        raise CurveError(f"no external VMAF score for M={format_scale(scale)}, QP {qp}")
                    scores["vmaf"] = cfg.vmaf_scores[key]
                return RDPoint(qp, enc.bitrate_kbps, **scores)

            with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.max_jobs) as pool:
                points = list(pool.map(point, cfg.qp_list))
            results[scale] = LadderResult(scale, sorted(points, key=lambda p: p.qp), _flags(points, cfg))
    return results


def _flags(points: Sequence[RDPoint], cfg: LadderConfig) -> list[str]:
    flags = []
    if len({p.bitrate_kbps for p in points}) == 1:
        flags.append("degenerate: every QP has the same bitrate (no rate-quality tradeoff)")
    for metric in cfg.metrics:
        values = [p.quality(metric) for p in points]
        if len(set(values)) == 1:
            flags.append(f"degenerate: {metric} is constant across QPs")
    return flags


def load_vmaf_scores(path: str | Path, default_scale: Fraction | None = None) -> dict[tuple[Fraction, int], float]:
    """Read externally computed VMAF: columns ``qp, vmaf`` and optionally ``scale``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            scale = parse_scale(row["scale"]) if row.get("scale") else default_scale
            if scale is None:
                raise CurveError(f"{path}: row for QP {row['qp']} has no scale and no default was given")
            out[(scale, int(row["qp"]))] = float(row["vmaf"])
    return out


# --- BD-rate report ------------------------------------------------------------


@dataclasses.dataclass
class BDTable:
    rows: list[tuple[Fraction, str, float]]

    def value(self, scale: Fraction, metric: str) -> float:
        for s, m, v in self.rows:
            if s == scale and m == metric:
                return v
        raise KeyError((scale, metric))

    def to_text(self) -> str:
        metrics = list(dict.fromkeys(m for _, m, _ in self.rows))
        scales = list(dict.fromkeys(s for s, _, _ in self.rows))
        header = ["M"] + [f"{m.upper()} BD-rate %" for m in metrics]
        body = [[format_scale(s)] + [f"{self.value(s, m):+.2f}" for m in metrics] for s in scales]
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header] + body]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["scale", "metric", "bd_rate_percent"])
        for s, m, v in self.rows:
            writer.writerow([format_scale(s), m, f"{v:.4f}"])
        return buf.getvalue()


def report_bdrate(
    baseline: Mapping[Fraction, Sequence[RDPoint]],
    test: Mapping[Fraction, Sequence[RDPoint]],
    metrics: Sequence[str] = ("psnr", "ssim"),
    fit: str = "pchip",
) -> BDTable:
    """BD-rate of ``test`` against ``baseline`` for every (scale, metric)."""
    if set(baseline) != set(test):
        raise CurveError(
            f"baseline scales {sorted(map(format_scale, baseline))} differ from test scales {sorted(map(format_scale, test))}"
        )
    rows = []
    for scale in sorted(baseline):
        for metric in metrics:
            ref = curve_from_points(baseline[scale], metric)
            tst = curve_from_points(test[scale], metric)
            for name, curve in (("baseline", ref), ("test", tst)):
                for v in curve.violations():
                    log.warning("M=%s %s curve: %s", format_scale(scale), name, v)
            rows.append((scale, metric, bd_rate(ref, tst, fit)))
    return BDTable(rows)


def _points(results: Mapping[Fraction, LadderResult]) -> dict[Fraction, list[RDPoint]]:
    return {s: r.points for s, r in results.items()}


# --- conv-resize vs resize-conv -----------------------------------------------


@dataclasses.dataclass
class OrderReport:
    """Side-by-side results of the two first-stage orderings."""

    scale: Fraction
    losses: dict[str, float]
    psnr: dict[str, float]
    bdrates: dict[str, dict[str, float]] | None = None
    histories: dict[str, list[tuple[int, float]]] = dataclasses.field(default_factory=dict, repr=False)

    def to_text(self) -> str:
        kinds = list(self.losses)
        lines = [f"ordering study at M={format_scale(self.scale)}"]
        header = ["", *kinds]
        rows = [
            ["final loss (MSE)", *[f"{self.losses[k]:.6g}" for k in kinds]],
            ["recon PSNR dB", *[f"{self.psnr[k]:.3f}" for k in kinds]],
        ]
        if self.bdrates:
            for metric in next(iter(self.bdrates.values())):
                rows.append([f"{metric} BD-rate %", *[f"{self.bdrates[k][metric]:+.2f}" for k in kinds]])
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header] + rows]
        winner = min(kinds, key=lambda k: self.losses[k])
        lines.append(f"lower loss: {winner}")
        return "\n".join(lines) + "\n"


def compare_order(
    dataset: Sequence[np.ndarray],
    cfg: TrainConfig,
    eval_crops: Sequence[np.ndarray] | None = None,
    networks: Mapping[str, Network] | None = None,
    video: Y4MVideo | Sequence[np.ndarray] | None = None,
    ladder: LadderConfig | None = None,
) -> OrderReport:
    """Train (or take) a conv-resize and a resize-conv CNN-CR and compare them.

    Both variants share every setting except the first-stage ordering.
    Losses are measured on ``eval_crops`` (default: the dataset itself when
    its images are crop-sized).  With ``video`` and ``ladder``, each variant
    is also run through the encode ladder and scored by BD-rate against
    Lanczos downsampling.
    """
    kinds = (BlockKind.CONV_RESIZE.value, BlockKind.RESIZE_CONV.value)
    histories = {}
    if networks is None:
        networks = {}
        for kind in kinds:
            net, hist = train_loop(dataset, dataclasses.replace(cfg, block=kind))
            networks[kind] = net
            histories[kind] = hist
    else:
        if set(networks) != set(kinds):
            raise ValueError(f"networks must be keyed by {kinds}")
        for kind, net in networks.items():
            if net.block.value != kind:
                raise ValueError(f"network under {kind!r} is a {net.block.value} network")
        a, b = networks[kinds[0]], networks[kinds[1]]
        if (a.scale, a.num_stages, a.resize_filter) != (b.scale, b.num_stages, b.resize_filter):
            raise ValueError("mismatched configs: the two networks differ in more than block kind")
        if a.scale != cfg.scale:
            raise ValueError(f"networks are for M={format_scale(a.scale)}, config says {format_scale(cfg.scale)}")

    crops = eval_crops if eval_crops is not None else dataset
    losses = {k: dataset_loss(networks[k], crops, cfg.upsampler) for k in kinds}
    psnrs = {k: 10.0 * np.log10(1.0 / losses[k]) if losses[k] > 0 else float("inf") for k in kinds}

    bdrates = None
    if video is not None and ladder is not None:
        ladder = dataclasses.replace(ladder, scales=[cfg.scale])
        base = _points(run_ladder(video, "lanczos", ladder))
        bdrates = {}
        for k in kinds:
            res = _points(run_ladder(video, networks[k], ladder))
            table = report_bdrate(base, res, [m for m in ladder.metrics])
            bdrates[k] = {m: table.value(cfg.scale, m) for m in ladder.metrics}
    return OrderReport(cfg.scale, losses, psnrs, bdrates, histories)
