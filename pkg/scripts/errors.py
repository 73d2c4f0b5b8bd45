"""
Exception types raised across the MediProbe modules.

Library code logs the problem and raises one of these; the CLI and the pipeline
orchestrator catch them and turn them into exit codes.
"""


class MediProbeError(Exception):
    """Root of every error raised on purpose by this package."""


class RejectedInputError(MediProbeError, ValueError):
    """An argument lies outside the accepted domain (e.g. image size below 16)."""


class ImageFormatError(MediProbeError, ValueError):
    """A PNG file is corrupt or has an unsupported mode / bit depth."""


class UnsupportedShapeError(MediProbeError, ValueError):
    """An operation needs a parametric mask but was given a Perlin one."""


class PlacementError(MediProbeError, RuntimeError):
    """CutPaste found no valid source location for the patch."""


class PreconditionError(MediProbeError, ValueError):
    """A documented precondition does not hold (e.g. region touches the border)."""


class ShapeError(MediProbeError, ValueError):
    """Tensor or image dimensions do not match what the model expects."""


class LengthError(MediProbeError, ValueError):
    """A token sequence does not fit into the text encoder context."""


class ConfigError(MediProbeError, ValueError):
    """Invalid encoder, training or run configuration."""


class CheckpointFormatError(MediProbeError, ValueError):
    """A checkpoint file is truncated or malformed."""


class CheckpointIncompatibleError(MediProbeError, ValueError):
    """A checkpoint does not belong to the encoder it is loaded against."""


class UndefinedMetricError(MediProbeError, ValueError):
    """AUROC requested on a population with a single class."""


class DegenerateFieldError(MediProbeError, RuntimeError):
    """Perlin binarization could not reach the requested area band."""


class NonFiniteLossError(MediProbeError, RuntimeError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"Non-finite loss at step {step}")
