"""Attention capture for causal LMs, emitting ATTRC01 trace files."""

from .capture import CaptureConfig, CaptureResult, capture_run
from .format import (
    BadMagic,
    NormalizationViolation,
    TraceFormatError,
    TraceSummary,
    TruncatedTrace,
    validate_attrc,
    write_attrc,
)

__version__ = "0.1.0"

__all__ = [
    "BadMagic",
    "CaptureConfig",
    "CaptureResult",
    "NormalizationViolation",
    "TraceFormatError",
    "TraceSummary",
    "TruncatedTrace",
    "capture_run",
    "validate_attrc",
    "write_attrc",
]
