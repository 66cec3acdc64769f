"""Command-line entry point: ``convresize <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import harness, media, metrics
from .errors import ConvResizeError
from .nn import load_checkpoint
from .resample import FilterKind, resize_by_scale
from .tensor import format_scale, parse_scale
from .train import TrainConfig, sample_batch, train_loop, write_loss_history

log = logging.getLogger("convresize")


def _qps(text: str) -> tuple[int, ...]:
    if "-" in text and "," not in text:
        lo, hi = (int(v) for v in text.split("-"))
        return harness.even_qp_ladder(lo, hi)
    return tuple(int(v) for v in text.split(","))


def _scales(text: str) -> list[Fraction]:
    return [parse_scale(v) for v in text.split(",")]


def _metrics(text: str) -> tuple[str, ...]:
    return tuple(m.strip().lower() for m in text.split(",") if m.strip())


def _load_dataset(directory: str) -> list[np.ndarray]:
    paths = media.list_images(directory)
    if not paths:
        raise ConvResizeError(f"no images found in {directory}")
    return [media.load_image_rgb(p)[0] for p in paths]


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {
        "scale": args.scale,
        "block": args.block,
        "iterations": args.iters,
        "seed": args.seed,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "crop_base": args.crop_base,
        "stages": getattr(args, "stages", None),
    }
    return dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def cmd_train(args) -> int:
    cfg = _train_config(args)
    dataset = _load_dataset(args.data)
    out = Path(args.out)
    cfg.save(out.with_suffix(".cfg"))
    log.info("training %s at M=%s on %d images, crop %d", cfg.block.value, format_scale(cfg.scale), len(dataset), cfg.crop)
    net, history = train_loop(dataset, cfg, report_every=args.report_every, checkpoint=out)
    write_loss_history(history, args.loss_csv or out.with_suffix(".loss.csv"))
    if history:
        print(f"iterations {len(history)}  first loss {history[0][1]:.6g}  last loss {history[-1][1]:.6g}")
    print(f"checkpoint written to {out}")
    return 0


def _read_input(path: Path):
    if path.suffix.lower() == ".y4m":
        video = media.read_y4m_video(path)
        return [media.yuv420_to_rgb(f) for f in video.frames], video.fps
    return [media.load_image_rgb(path)], None


def cmd_resize(args) -> int:
    scale = parse_scale(args.scale)
    src, dst = Path(args.input), Path(args.out)
    frames, fps = _read_input(src)
    if args.method.startswith("ckpt:"):
        if args.direction != "down":
            raise ConvResizeError("a checkpoint can only downsample")
        down = harness.make_downsampler(args.method, scale)
        out = [down(f) for f in frames]
    else:
        filt = FilterKind.parse(args.method)
        out = [resize_by_scale(f, filt, scale, args.direction) for f in frames]
    if dst.suffix.lower() == ".y4m":
        media.write_y4m(dst, [media.rgb_to_yuv420(f) for f in out], fps or Fraction(30))
    elif dst.suffix.lower() == ".yuv":
        media.write_yuv(dst, [media.rgb_to_yuv420(f) for f in out])
    else:
        if len(out) != 1:
            raise ConvResizeError("multi-frame input must be written as .y4m or .yuv")
        media.save_image_png(out[0], dst)
    h, w = out[0].shape[1:3]
    print(f"{src} -> {dst}: {w}x{h}, {len(out)} frame(s)")
    return 0


def _method(args) -> str:
    return f"ckpt:{args.ckpt}" if args.ckpt else args.method


def _scale_for(args) -> list[Fraction]:
    if args.scale:
        return _scales(args.scale)
    if args.ckpt:
        return [load_checkpoint(args.ckpt).scale]
    raise ConvResizeError("--scale is required unless --ckpt is given")


def _print_flags(results) -> None:
    for scale, res in results.items():
        for flag in res.flags:
            print(f"M={format_scale(scale)}: {flag}", file=sys.stderr)


def cmd_eval(args) -> int:
    video = media.read_y4m_video(args.src)
    cfg = harness.LadderConfig(
        scales=_scale_for(args), qp_list=_qps(args.qps), upsampler=args.upsampler, metrics=_metrics(args.metrics)
    )
    results = harness.run_ladder(video, _method(args), cfg)
    if len(results) != 1:
        raise ConvResizeError("eval takes exactly one scale")
    (res,) = results.values()
    metrics.write_points_csv(res.points, args.out)
    _print_flags(results)
    print(f"curve written to {args.out}")
    return 0


def cmd_ladder(args) -> int:
    video = media.read_y4m_video(args.src)
    scales = _scale_for(args)
    mets = _metrics(args.metrics)
    vmaf = None
    if args.vmaf_scores:
        vmaf = harness.load_vmaf_scores(args.vmaf_scores, scales[0] if len(scales) == 1 else None)
        if "vmaf" not in mets:
            mets = mets + ("vmaf",)
    cfg = harness.LadderConfig(
        scales=scales,
        qp_list=_qps(args.qps),
        encoder_cmd=args.encoder_cmd,
        decoder_cmd=args.decoder_cmd,
        upsampler=args.upsampler,
        metrics=mets,
        vmaf_scores=vmaf,
        max_jobs=args.jobs,
        decoded_format=args.decoded_format,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = harness.run_ladder(video, _method(args), cfg)
    for scale, res in results.items():
        path = out / f"curve_M{scale.numerator}-{scale.denominator}.csv"
        metrics.write_points_csv(res.points, path)
        print(f"M={format_scale(scale)}: {path}")
    _print_flags(results)
    return 0


def cmd_bdrate(args) -> int:
    ref = metrics.curve_from_points(metrics.read_points_csv(args.baseline), args.metric)
    test = metrics.curve_from_points(metrics.read_points_csv(args.test), args.metric)
    for name, curve in (("baseline", ref), ("test", test)):
        for v in curve.violations():
            print(f"warning: {name} curve: {v}", file=sys.stderr)
    value = metrics.bd_rate(ref, test, args.fit)
    print(f"{args.metric.upper()} BD-rate ({args.fit}): {value:+.4f} %")
    return 0


def cmd_compare_order(args) -> int:
    cfg = _train_config(args)
    dataset = _load_dataset(args.data)
    rng = np.random.default_rng(cfg.seed + 1)
    eval_cfg = dataclasses.replace(cfg, batch_size=args.eval_crops)
    eval_crops = list(sample_batch(dataset, eval_cfg, rng))
    video = ladder = None
    if args.src:
        video = media.read_y4m_video(args.src)
        ladder = harness.LadderConfig(
            scales=[cfg.scale],
            qp_list=_qps(args.qps),
            encoder_cmd=args.encoder_cmd,
            decoder_cmd=args.decoder_cmd,
            upsampler=cfg.upsampler,
            metrics=_metrics(args.metrics),
        )
    report = harness.compare_order(dataset, cfg, eval_crops=eval_crops, video=video, ladder=ladder)
    text = report.to_text()
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        for kind, hist in report.histories.items():
            write_loss_history(hist, out / f"{kind}.loss.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convresize",
        description="Train CNN-CR downsamplers, resize media and score encode ladders by BD-rate.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log encoder calls and progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def training_args(p, iters_required: bool):
        p.add_argument("--scale", help="scaling factor M, e.g. 3/2 or 2.5")
        p.add_argument("--data", required=True, help="directory of training images")
        p.add_argument("--iters", type=int, required=iters_required)
        p.add_argument("--seed", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--crop-base", type=int, help="crop is M*floor(base/M) (default 256)")
        p.add_argument("--config", help="key=value TrainConfig file; flags override it")

    p = sub.add_parser("train", help="train a CNN-CR downsampler")
    training_args(p, iters_required=False)
    p.add_argument("--block", choices=["conv-resize", "resize-conv", "strided", "conv-pool"])
    p.add_argument("--stages", type=int, help="number of conv stages (default 10)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report-every", type=int, default=1000)
    p.add_argument("--loss-csv", help="loss history CSV (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("resize", help="resize an image or Y4M video")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--scale", required=True)
    p.add_argument("--method", default="lanczos", help="lanczos|bicubic|bilinear|ckpt:PATH (suffix -noaa disables antialiasing)")
    p.add_argument("--direction", choices=["down", "up"], default="down")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_resize)

    def eval_args(p):
        p.add_argument("--src", required=True, help="source Y4M (4:2:0)")
        p.add_argument("--ckpt", help="CNN-CR checkpoint to evaluate")
        p.add_argument("--method", default="lanczos", help="filter downsampler when no --ckpt is given")
        p.add_argument("--scale", help="scale(s), comma separated; default: the checkpoint's")
        p.add_argument("--upsampler", default="bicubic")
        p.add_argument("--metrics", default="psnr,ssim")
        p.add_argument("--qps", default=",".join(map(str, harness.DEFAULT_QPS)), help="comma list or LO-HI (15 even steps)")

    p = sub.add_parser("eval", help="no-encoder evaluation of one downsampler")
    eval_args(p)
    p.add_argument("--out", required=True, help="curve CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ladder", help="encode ladder through external encoder/decoder commands")
    eval_args(p)
    p.add_argument("--encoder-cmd", required=True, help="template with {input} {output} {qp} {width} {height}")
    p.add_argument("--decoder-cmd", required=True, help="template with {input} {output} {width} {height}")
    p.add_argument("--vmaf-scores", help="CSV of external VMAF scores: qp,vmaf[,scale]")
    p.add_argument("--decoded-format", choices=["y4m", "yuv"], default="y4m", help="what the decoder writes to {output}")
    p.add_argument("--jobs", type=int, default=1, help="parallel encoder processes")
    p.add_argument("--out", required=True, help="output directory for curve CSVs")
    p.set_defaults(func=cmd_ladder)

    p = sub.add_parser("bdrate", help="BD-rate between two curve CSVs")
    p.add_argument("--baseline", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--metric", choices=list(metrics.METRICS), default="psnr")
    p.add_argument("--fit", choices=["pchip", "cubic"], default="pchip")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("compare-order", help="train conv-resize and resize-conv and compare them")
    training_args(p, iters_required=True)
    p.add_argument("--eval-crops", type=int, default=8)
    p.add_argument("--src", help="optional Y4M to also compare BD-rates in an encode ladder")
    p.add_argument("--encoder-cmd")
    p.add_argument("--decoder-cmd")
    p.add_argument("--qps", default=",".join(map(str, harness.DEFAULT_QPS)))
    p.add_argument("--metrics", default="psnr,ssim")
    p.add_argument("--out", help="directory for report and loss histories")
    p.set_defaults(func=cmd_compare_order, block=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConvResizeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
