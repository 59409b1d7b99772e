"""Exception types raised across the package."""


class SoftReconError(Exception):
    """Base class for all package errors."""


class CollinearPoints(SoftReconError):
    pass


class SizeMismatch(SoftReconError):
    pass


class DegenerateMatrix(SoftReconError):
    pass


class IndexOutOfRange(SoftReconError):
    pass


class DegenerateBounds(SoftReconError):
    pass


class RankDeficient(SoftReconError):
    pass


class MissingMarker(SoftReconError):
    pass


class ParseError(SoftReconError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonMonotonicTime(SoftReconError):
    pass


class UnknownBatch(SoftReconError):
    pass


class EmptyDataset(SoftReconError):
    pass


class NonFiniteLoss(SoftReconError):
    pass


class SolverStalled(SoftReconError):
    pass


class DimMismatch(SoftReconError):
    pass


class VersionMismatch(SoftReconError):
    pass


class CorruptFile(SoftReconError):
    pass
