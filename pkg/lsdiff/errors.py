"""
Exception hierarchy for lsdiff.

Every error raised on purpose by the package derives from ``LipSyncError`` and
carries a stable ``code`` string (``UNREADABLE_MEDIA``, ``GAP_TOO_LONG``, ...)
so callers and the CLI can react to the failure kind without parsing messages.
"""
from typing import Optional


class LipSyncError(Exception):
    code = "LIPSYNC_ERROR"

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        if code is not None:
            self.code = code
        self.message = message

    def __str__(self):
        return f"[{self.code}] {self.message}"


class MediaError(LipSyncError):
    """UNREADABLE_MEDIA, EMPTY_VIDEO, INVALID_RATE, RATE_MISMATCH, NONFINITE_INPUT"""
    code = "UNREADABLE_MEDIA"


class ShapeMismatch(LipSyncError):
    code = "SHAPE_MISMATCH"


class ConfigMismatch(LipSyncError):
    code = "CONFIG_MISMATCH"


class SchemaError(LipSyncError):
    code = "SCHEMA_ERROR"

    def __init__(self, message: str, field: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class MaskError(LipSyncError):
    """GAP_TOO_LONG, NO_FACE"""
    code = "GAP_TOO_LONG"


class DiffusionError(LipSyncError):
    code = "INVALID_SIGMA"


class TrainingError(LipSyncError):
    """CLIP_TOO_SHORT, NONFINITE_LOSS, DEGENERATE_MASK, IO_FAILURE"""
    code = "CLIP_TOO_SHORT"

    def __init__(self, message: str, code: Optional[str] = None, sample_ids=None):
        super().__init__(message, code)
        self.sample_ids = list(sample_ids) if sample_ids is not None else []


class InferenceError(LipSyncError):
    code = "TOO_SHORT"


class MetricError(LipSyncError):
    """MISSING_PAIR, NON_PSD_COVARIANCE"""
    code = "MISSING_PAIR"
