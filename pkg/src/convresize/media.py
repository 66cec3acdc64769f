"""Still-image and 4:2:0 video I/O, and BT.709 RGB <-> YCbCr 4:2:0.

Chroma is center-sited: downsampling averages each 2x2 block, upsampling
is half-pixel bilinear interpolation, so the two are consistent.
"""

from __future__ import annotations

import dataclasses
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import MediaFormatError, ShapeError, TruncatedFileError, UnsupportedColorspaceError
from .resample import FilterKind, resize_forward
from .tensor import DTYPE, check_tensor

KR, KB = 0.2126, 0.0722
KG = 1.0 - KR - KB

_CHROMA_UP = FilterKind("bilinear", antialias=False)


@dataclasses.dataclass
class FramePlanar420:
    """One 8-bit YCbCr 4:2:0 frame; ``y`` is (H, W), ``u``/``v`` are (H/2, W/2)."""

    y: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        h, w = self.y.shape
        if h % 2 or w % 2 or h < 2 or w < 2:
            raise ShapeError(f"4:2:0 frames need even, positive dims; got {w}x{h}")
        for name in ("u", "v"):
            plane = getattr(self, name)
            if plane.shape != (h // 2, w // 2):
                raise ShapeError(f"{name} plane is {plane.shape}, expected {(h // 2, w // 2)}")
        for name in ("y", "u", "v"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.uint8))

    @property
    def width(self) -> int:
        return self.y.shape[1]

    @property
    def height(self) -> int:
        return self.y.shape[0]

    def tobytes(self) -> bytes:
        return self.y.tobytes() + self.u.tobytes() + self.v.tobytes()

    @classmethod
    def frombytes(cls, data: bytes, width: int, height: int) -> FramePlanar420:
        ysize = width * height
        csize = ysize // 4
        if len(data) != ysize + 2 * csize:
            raise TruncatedFileError(f"expected {ysize + 2 * csize} bytes for a {width}x{height} frame, got {len(data)}")
        buf = np.frombuffer(data, dtype=np.uint8)
        return cls(
            buf[:ysize].reshape(height, width),
            buf[ysize : ysize + csize].reshape(height // 2, width // 2),
            buf[ysize + csize :].reshape(height // 2, width // 2),
        )


def frame_size(width: int, height: int) -> int:
    return width * height * 3 // 2


# --- still images --------------------------------------------------------------


def load_image_rgb(path: str | Path) -> np.ndarray:
    """Decode an image file to a ``(1, H, W, 3)`` tensor in [0, 1]."""
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise MediaFormatError(f"cannot decode {path}: {exc}") from exc
    return (rgb.astype(DTYPE) / DTYPE(255.0))[None]


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image_png(x: np.ndarray, path: str | Path) -> None:
    """Write a single-image tensor (or an (H, W, 3) array) as 8-bit PNG."""
    arr = np.asarray(x)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ShapeError(f"can only save one image at a time, got batch of {arr.shape[0]}")
        arr = arr[0]
    Image.fromarray(to_uint8(arr), mode="RGB").save(path, format="PNG")


def list_images(directory: str | Path) -> list[Path]:
    exts = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in exts)


# --- colour conversion ---------------------------------------------------------


def _ranges(full_range: bool) -> tuple[float, float, float]:
    """(luma offset, luma span, chroma span)"""
    return (0.0, 255.0, 255.0) if full_range else (16.0, 219.0, 224.0)


def rgb_to_yuv420(x: np.ndarray, full_range: bool = False) -> FramePlanar420:
    """BT.709 RGB in [0, 1] -> 8-bit 4:2:0, chroma by 2x2 box averaging."""
    check_tensor(x)
    if x.shape[0] != 1 or x.shape[3] != 3:
        raise ShapeError(f"expected a single RGB image (1, H, W, 3), got {x.shape}")
    _, h, w, _ = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"4:2:0 conversion needs even dims, got {w}x{h}")
    rgb = np.clip(x[0].astype(np.float64), 0.0, 1.0)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    yp = KR * r + KG * g + KB * b
    cb = (b - yp) / (2.0 * (1.0 - KB))
    cr = (r - yp) / (2.0 * (1.0 - KR))
    off, yspan, cspan = _ranges(full_range)

    def box(p):
        return p.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))

    def q(v):
        return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)

    return FramePlanar420(q(off + yspan * yp), q(128.0 + cspan * box(cb)), q(128.0 + cspan * box(cr)))


def yuv420_to_rgb(frame: FramePlanar420, full_range: bool = False) -> np.ndarray:
    """8-bit 4:2:0 -> ``(1, H, W, 3)`` RGB in [0, 1], bilinear chroma upsampling."""
    off, yspan, cspan = _ranges(full_range)
    yp = (frame.y.astype(np.float64) - off) / yspan
    chroma = np.stack([frame.u, frame.v], axis=-1).astype(DTYPE)[None]
    chroma = resize_forward(chroma, _CHROMA_UP, frame.height, frame.width)[0].astype(np.float64)
    cb = (chroma[..., 0] - 128.0) / cspan
    cr = (chroma[..., 1] - 128.0) / cspan
    r = yp + 2.0 * (1.0 - KR) * cr
    b = yp + 2.0 * (1.0 - KB) * cb
    g = (yp - KR * r - KB * b) / KG
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(rgb, 0.0, 1.0).astype(DTYPE)[None]


# --- Y4M -----------------------------------------------------------------------

_SUPPORTED_420 = {"420", "420jpeg", "420paldv", "420mpeg2"}


@dataclasses.dataclass
class Y4MVideo:
    """Frames plus the header tokens needed to write the stream back verbatim."""

    width: int
    height: int
    frames: list[FramePlanar420]
    tokens: list[str] = dataclasses.field(default_factory=lambda: ["F30:1", "Ip", "A1:1", "C420jpeg"])
    frame_params: list[str] | None = None

    @property
    def fps(self) -> Fraction:
        for tok in self.tokens:
            if tok.startswith("F"):
                num, _, den = tok[1:].partition(":")
                return Fraction(int(num), int(den or 1))
        return Fraction(30)

    @property
    def duration_s(self) -> float:
        return float(len(self.frames) / self.fps)


def parse_y4m(data: bytes, name: str = "<y4m>") -> Y4MVideo:
    nl = data.find(b"\n")
    if nl < 0:
        raise TruncatedFileError(f"{name}: missing stream header")
    header = data[:nl].decode("ascii", errors="replace").split(" ")
    if header[0] != "YUV4MPEG2":
        raise MediaFormatError(f"{name}: not a YUV4MPEG2 stream")
    width = height = None
    tokens = []
    for tok in header[1:]:
        if not tok:
            continue
        if tok[0] == "W":
            width = int(tok[1:])
        elif tok[0] == "H":
            height = int(tok[1:])
        else:
            if tok[0] == "C" and tok[1:] not in _SUPPORTED_420:
                raise UnsupportedColorspaceError(f"{name}: colourspace {tok[1:]} is not supported (need 4:2:0 8-bit)")
            tokens.append(tok)
    if not width or not height:
        raise MediaFormatError(f"{name}: header lacks W/H")

    fsize = frame_size(width, height)
    frames, params = [], []
    pos = nl + 1
    while pos < len(data):
        end = data.find(b"\n", pos)
        if end < 0 or not data.startswith(b"FRAME", pos):
            raise TruncatedFileError(f"{name}: bad or truncated frame header at byte {pos}")
        params.append(data[pos + 5 : end].decode("ascii"))
        start = end + 1
        if start + fsize > len(data):
            raise TruncatedFileError(f"{name}: frame {len(frames)} is truncated")
        frames.append(FramePlanar420.frombytes(data[start : start + fsize], width, height))
        pos = start + fsize
    return Y4MVideo(width, height, frames, tokens, params if any(params) else None)


def read_y4m_video(path: str | Path) -> Y4MVideo:
    return parse_y4m(Path(path).read_bytes(), str(path))


def read_y4m(path: str | Path) -> list[FramePlanar420]:
    """All frames of a 4:2:0 Y4M file."""
    return read_y4m_video(path).frames


def format_y4m(video: Y4MVideo) -> bytes:
    parts = [" ".join(["YUV4MPEG2", f"W{video.width}", f"H{video.height}", *video.tokens]).encode("ascii") + b"\n"]
    for i, frame in enumerate(video.frames):
        if (frame.width, frame.height) != (video.width, video.height):
            raise ShapeError(f"frame {i} is {frame.width}x{frame.height}, stream is {video.width}x{video.height}")
        extra = video.frame_params[i] if video.frame_params else ""
        parts.append(b"FRAME" + extra.encode("ascii") + b"\n")
        parts.append(frame.tobytes())
    return b"".join(parts)


def write_y4m(path: str | Path, frames: Sequence[FramePlanar420] | Y4MVideo, fps: Fraction = Fraction(30)) -> None:
    if isinstance(frames, Y4MVideo):
        video = frames
    else:
        if not frames:
            raise ValueError("no frames to write")
        tokens = [f"F{fps.numerator}:{fps.denominator}", "Ip", "A1:1", "C420jpeg"]
        video = Y4MVideo(frames[0].width, frames[0].height, list(frames), tokens)
    Path(path).write_bytes(format_y4m(video))


# --- raw planar .yuv -----------------------------------------------------------


def write_yuv(path: str | Path, frames: Sequence[FramePlanar420]) -> None:
    with open(path, "wb") as fh:
        for frame in frames:
            fh.write(frame.tobytes())


def read_yuv(path: str | Path, width: int, height: int) -> list[FramePlanar420]:
    """Raw concatenated I420 frames; dims come from the caller."""
    data = Path(path).read_bytes()
    fsize = frame_size(width, height)
    if width % 2 or height % 2:
        raise ShapeError(f"4:2:0 frames need even dims, got {width}x{height}")
    if len(data) % fsize:
        raise TruncatedFileError(f"{path}: {len(data)} bytes is not a whole number of {width}x{height} frames")
    return [FramePlanar420.frombytes(data[i : i + fsize], width, height) for i in range(0, len(data), fsize)]
