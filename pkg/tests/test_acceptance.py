"""Acceptance checks, one printed PASS/FAIL line per criterion.

Run on their own with ``pytest tests/test_acceptance.py -v``; the verdict
lines are written straight to the terminal even when output is captured.
The desk-scale training runs (criteria 7-9) take several minutes on one
CPU core.
"""

import functools
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from convresize.harness import LadderConfig, run_ladder
from convresize.media import Y4MVideo, rgb_to_yuv420
from convresize.metrics import RateQualityCurve, bd_rate, format_points_csv
from convresize.nn import build_cnncr, network_forward
from convresize.resample import BICUBIC, BILINEAR, LANCZOS3, build_resample_matrix, resize_backward, resize_by_scale, resize_forward
from convresize.tensor import dot
from convresize.train import TrainConfig, crop_size, dataset_loss, mse_loss, train_loop

from helpers import analytic_gradients, fd_gradients, fixed_crops, randomize_head, synthetic_image

pytestmark = pytest.mark.slow

FILTERS = [BILINEAR, BICUBIC, LANCZOS3]
SCALES = [Fraction(3, 2), Fraction(2), Fraction(5, 2), Fraction(3), Fraction(4), Fraction(5)]


@pytest.fixture
def verdict(capsys):
    def emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit


# --- 1: adjoint suite -------------------------------------------------------------


def test_c1_adjoint_suite(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for filt in FILTERS:
        for scale in SCALES:
            h = w = 60  # divisible by every scale in the list
            oh, ow = int(h / scale), int(w / scale)
            for _ in range(100):
                x = rng.standard_normal((1, h, w, 3)).astype(np.float32)
                y = rng.standard_normal((1, oh, ow, 3)).astype(np.float32)
                lhs = dot(resize_forward(x, filt, oh, ow), y)
                rhs = dot(x, resize_backward(y, filt, h, w))
                worst = max(worst, abs(lhs - rhs) / (1e-4 * (1 + abs(lhs))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1.0 and elapsed < 10.0
    verdict(1, ok, f"1800 pairs, worst |<Rx,y>-<x,R^T y>| at {worst:.3g} of tolerance, {elapsed:.1f}s (limit 10s)")


# --- 2: gradient suite ------------------------------------------------------------


def test_c2_gradient_suite(verdict):
    net = build_cnncr("3/2", "conv_resize", rng_seed=0, stages=3)
    # a fresh network has a zero last layer, which zeroes every upstream gradient
    randomize_head(net, seed=0)
    x = synthetic_image(12, 12, seed=1)[None]
    start = time.perf_counter()
    analytic = analytic_gradients(net, x)
    numeric = fd_gradients(net, x, h=1e-3)
    elapsed = time.perf_counter() - start
    names = [f"{kind}{i + 1}" for i in range(3) for kind in ("w", "b")]
    bad_total, total, parts = 0, 0, []
    for name, a, f in zip(names, analytic, numeric):
        a = a.astype(np.float64)
        denom = np.maximum(np.abs(a), np.abs(f))
        rel = np.divide(np.abs(a - f), denom, out=np.zeros_like(denom), where=denom > 0)
        bad = int((rel > 1e-2).sum())
        bad_total += bad
        total += a.size
        tensor_rel = np.linalg.norm(a - f) / max(np.linalg.norm(a), np.linalg.norm(f), 1e-30)
        parts.append(f"{name} {bad}/{a.size} (tensor {tensor_rel:.0e})")
    ok = bad_total == 0 and elapsed < 30.0
    verdict(
        2,
        ok,
        f"entries off by >1e-2 relative at h=1e-3: {bad_total}/{total} ({', '.join(parts)}), {elapsed:.1f}s (limit 30s)",
    )


# --- 3: resampler oracle ----------------------------------------------------------


def test_c3_resampler_oracle(verdict):
    rng = np.random.default_rng(3)
    sizes = {Fraction(3, 2): 15, Fraction(2): 16, Fraction(5, 2): 15, Fraction(3): 15, Fraction(4): 16, Fraction(5): 15}
    worst_dense = worst_row = worst_const = 0.0
    for filt in FILTERS:
        for scale, n in sizes.items():
            m = int(n / scale)
            x = rng.random((2, n, n, 3), dtype=np.float32)
            dense = build_resample_matrix(filt, n, m).to_dense()
            expected = np.einsum("ih,nhwc,jw->nijc", dense, x.astype(np.float64), dense)
            worst_dense = max(worst_dense, float(np.abs(resize_forward(x, filt, m, m) - expected).max()))
            for src, dst in ((n, m), (60, int(60 / scale)), (m, n)):
                rows = build_resample_matrix(filt, src, dst).to_dense().sum(axis=1)
                worst_row = max(worst_row, float(np.abs(rows - 1).max()))
            for v in (0.0, 0.7, 1.0):
                c = np.full((1, 60, 60, 3), v, np.float32)
                worst_const = max(worst_const, float(np.abs(resize_by_scale(c, filt, scale, "down") - v).max()))
    ok = worst_dense <= 1e-5 and worst_row <= 1e-6 and worst_const <= 1e-5
    verdict(
        3,
        ok,
        f"dense-matrix max diff {worst_dense:.2e} (<=1e-5), row-sum error {worst_row:.2e} (<=1e-6), "
        f"constant-image error {worst_const:.2e} (<=1e-5)",
    )


# --- 4: BD-rate oracle ------------------------------------------------------------


def test_c4_bdrate_oracle(verdict):
    ref = RateQualityCurve((800.0, 1500.0, 3000.0, 6000.0, 11000.0), (31.2, 34.0, 36.9, 39.5, 41.8))
    same = bd_rate(ref, ref)
    cheaper = bd_rate(ref, ref.scaled(0.9))
    dearer = bd_rate(ref, ref.scaled(2.0))
    products = [
        (1 + bd_rate(ref, ref.scaled(f)) / 100) * (1 + bd_rate(ref.scaled(f), ref) / 100) for f in (0.9, 2.0, 0.5, 1.3)
    ]
    anti = max(abs(p - 1) for p in products)
    ok = round(same, 3) == 0.0 and abs(cheaper + 10) <= 0.1 and abs(dearer - 100) <= 0.1 and anti <= 1e-3
    verdict(
        4,
        ok,
        f"identical {same:.3f}, 0.9x {cheaper:+.4f}, 2x {dearer:+.4f}, exchange product error {anti:.1e}",
    )


# --- 5: crop formula --------------------------------------------------------------


def test_c5_crop_table(verdict):
    got = [crop_size(m, 256) for m in SCALES]
    exact = [int(m * math.floor(256 / m)) for m in SCALES]  # Fraction arithmetic throughout
    ok = got == [255, 256, 255, 255, 256, 255] and got == exact
    verdict(5, ok, f"crops {got}")


# --- 6: zero-init identity --------------------------------------------------------


def test_c6_zero_init_identity(verdict):
    worst = 0.0
    x = synthetic_image(60, 60, seed=6)[None]
    for scale in ("3/2", "2", "5/2"):
        for seed in (0, 1):
            net = build_cnncr(scale, "conv_resize", rng_seed=seed)
            diff = np.abs(network_forward(net, x) - resize_by_scale(x, BICUBIC, scale, "down")).max()
            worst = max(worst, float(diff))
    verdict(6, worst <= 1e-6, f"max |net - bicubic| over M in 3/2, 2, 5/2: {worst:.2e} (<=1e-6)")


# --- 7-9: desk-scale training -----------------------------------------------------

ITERATIONS = 2000
CROP_BASE = {Fraction(3, 2): 18, Fraction(5, 2): 20}


def _crops(scale: Fraction) -> list[np.ndarray]:
    return fixed_crops(synthetic_image(128, 128, seed=1), crop_size(scale, CROP_BASE[scale]), count=8, seed=5)


def _train(scale: Fraction, block: str, seed: int):
    crops = _crops(scale)
    cfg = TrainConfig(
        scale=scale, block=block, batch_size=4, lr=1e-4, iterations=ITERATIONS, crop_base=CROP_BASE[scale], seed=seed
    )
    start = time.perf_counter()
    before = dataset_loss(build_cnncr(scale, block, seed), crops)
    net, history = train_loop(crops, cfg)
    return net, history, before, dataset_loss(net, crops), time.perf_counter() - start


@functools.lru_cache(maxsize=None)
def _cached_train(scale: Fraction, block: str, seed: int):
    return _train(scale, block, seed)


def _lanczos_psnr(crops) -> float:
    x = np.stack(crops)
    up = resize_by_scale(resize_by_scale(x, LANCZOS3, "3/2", "down"), BICUBIC, "3/2", "up")
    return 10 * math.log10(1 / mse_loss(x, up).value)


def test_c7_desk_scale_learning(verdict):
    _, _, before, after, elapsed = _cached_train(Fraction(3, 2), "conv_resize", 0)
    reduction = 1 - after / before
    net_psnr = 10 * math.log10(1 / after)
    base_psnr = _lanczos_psnr(_crops(Fraction(3, 2)))
    ok = reduction >= 0.20 and net_psnr - base_psnr >= 0.2
    verdict(
        7,
        ok,
        f"loss {before:.6g} -> {after:.6g} ({100 * reduction:.1f}% lower, need 20%); "
        f"PSNR {net_psnr:.2f} dB vs Lanczos/bicubic {base_psnr:.2f} dB ({net_psnr - base_psnr:+.2f}, need +0.2); {elapsed:.0f}s",
    )


def test_c8_ordering_trend(verdict):
    wins, parts = 0, []
    for seed in (0, 1, 2):
        cr = _cached_train(Fraction(5, 2), "conv_resize", seed)[3]
        rc = _cached_train(Fraction(5, 2), "resize_conv", seed)[3]
        wins += cr <= rc
        parts.append(f"seed {seed}: {cr:.7g} vs {rc:.7g}")
    verdict(8, wins >= 2, f"conv_resize <= resize_conv in {wins}/3 seeds ({'; '.join(parts)})")


def test_c9_determinism(verdict, tmp_path):
    net, history, *_ = _cached_train(Fraction(3, 2), "conv_resize", 0)
    _, again, *_ = _train(Fraction(3, 2), "conv_resize", 0)
    same_history = history == again

    frames = [rgb_to_yuv420(synthetic_image(48, 48, seed=s)[None]) for s in (7, 8)]
    video = Y4MVideo(48, 48, frames, ["F24:1", "Ip", "A1:1", "C420jpeg"])
    cfg = LadderConfig(scales=["3/2"], qp_list=(22, 27, 32, 37))
    csvs = []
    for i in range(2):
        path = tmp_path / f"eval{i}.csv"
        path.write_text(format_points_csv(run_ladder(video, net, cfg)[Fraction(3, 2)].points))
        csvs.append(path.read_bytes())
    ok = same_history and csvs[0] == csvs[1]
    verdict(9, ok, f"loss history repeat identical: {same_history} ({len(history)} entries); eval CSV byte-identical: {csvs[0] == csvs[1]}")
