"""Exception types raised across the package."""


class ConvResizeError(Exception):
    """Base class for every error raised by convresize."""


class ShapeError(ConvResizeError, ValueError):
    """Invalid tensor shape, or two operands whose shapes disagree."""


class ScaleError(ConvResizeError, ValueError):
    """Scale factor unusable in this context (non-integer, < 1, too large)."""


class IndivisibleSizeError(ConvResizeError, ValueError):
    """Input dims do not map to an exact integer output size; crop first."""


class StateError(ConvResizeError, RuntimeError):
    """Operation needs state that is missing, e.g. backward before forward."""


class MediaFormatError(ConvResizeError, ValueError):
    """Unreadable, truncated or unsupported image/video data."""


class CurveError(ConvResizeError, ValueError):
    """Rate-quality curves that cannot be compared."""


class EncoderError(ConvResizeError, RuntimeError):
    """An external encoder/decoder process failed."""

    def __init__(self, message: str, cmd: str = "", returncode: int | None = None, stderr: str = ""):
        super().__init__(message)
        self.cmd = cmd
        self.returncode = returncode
        self.stderr = stderr


class TrainingError(ConvResizeError, RuntimeError):
    """Training aborted, e.g. on a non-finite loss."""


class UnsupportedColorspaceError(MediaFormatError):
    """Y4M stream with a chroma layout other than 4:2:0."""


class TruncatedFileError(MediaFormatError):
    """File ended in the middle of a frame or header."""
