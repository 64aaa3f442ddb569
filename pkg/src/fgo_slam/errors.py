"""Error types raised across the pipeline.

Every error carries a short ``error_class`` string so the CLI can report
failures as a single machine-parsable line.
"""

from typing import Optional


class FgoError(Exception):
    """Base class for all pipeline errors."""

    error_class = "fgo-error"

    def __init__(self, message: str = "") -> None:
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        """Format the error as ``error: <class>: <message>``."""
        text = " ".join(self.message.split())
        return f"error: {self.error_class}: {text}"


class PointBehindCameraError(FgoError):
    error_class = "point-behind-camera"


class DegenerateConfigurationError(FgoError):
    error_class = "degenerate-configuration"


class DegenerateRayError(FgoError):
    error_class = "degenerate-ray"


class NoVisibleViewError(FgoError):
    error_class = "no-visible-view"


class ShapeMismatchError(FgoError):
    error_class = "shape-mismatch"


class DivergenceError(FgoError):
    """Raised when the map loss becomes NaN or infinite."""

    error_class = "divergence"

    def __init__(self, message: str, iteration: int, state: Optional[dict] = None) -> None:
        super().__init__(message)
        self.iteration = iteration
        self.state = state or {}


class InsufficientObservationsError(FgoError):
    error_class = "insufficient-observations"


class DanglingReferenceError(FgoError):
    error_class = "dangling-reference"


class DegenerateParallaxError(FgoError):
    error_class = "degenerate-parallax"


class TetrahedralizationError(FgoError):
    error_class = "tetrahedralization-failure"


class LengthMismatchError(FgoError):
    error_class = "length-mismatch"


class AllInvalidDepthError(FgoError):
    error_class = "all-invalid-depth"


class ConfigurationError(FgoError):
    error_class = "invalid-config"


class MissingFileError(FgoError):
    error_class = "missing-file"


class NoAssociationsError(FgoError):
    error_class = "no-associations"


class CheckpointFormatError(FgoError):
    error_class = "checkpoint-format"


class PipelineStageError(FgoError):
    """Wraps a failure inside a pipeline stage with the frame it happened on."""

    error_class = "stage-failure"

    def __init__(self, stage: str, frame_index: Optional[int], cause: Exception) -> None:
        where = f"frame {frame_index}" if frame_index is not None else "no frame"
        inner = cause.error_class if isinstance(cause, FgoError) else type(cause).__name__
        super().__init__(f"{stage} failed at {where}: {inner}: {cause}")
        self.stage = stage
        self.frame_index = frame_index
        self.cause = cause
        if isinstance(cause, FgoError):
            self.error_class = cause.error_class
