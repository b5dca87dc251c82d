"""Error types shared across the package. Each carries a stable machine code."""

from __future__ import annotations


class PemedError(Exception):
    """Base for all package errors."""

    code = "ERROR"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class ShapeMismatchError(PemedError):
    code = "SHAPE_MISMATCH"


class BadGeometryError(PemedError):
    code = "BAD_GEOMETRY"


class NonFiniteError(PemedError):
    code = "NON_FINITE"


class NonScalarLossError(PemedError):
    code = "NON_SCALAR_LOSS"


class OutOfBoundsClickError(PemedError):
    code = "OUT_OF_BOUNDS_CLICK"


class DecodeError(PemedError):
    code = "DECODE_ERROR"


class UnsupportedFormatError(PemedError):
    code = "UNSUPPORTED_FORMAT"


class NoErrorRegionError(PemedError):
    code = "NO_ERROR_REGION"


class DatasetEmptyError(PemedError):
    code = "DATASET_EMPTY"


class EmptyGtError(PemedError):
    code = "EMPTY_GT"


class DivergenceError(PemedError):
    code = "DIVERGENCE"


class StateCorruptError(PemedError):
    code = "STATE_CORRUPT"
