"""Exception hierarchy shared by every fdfcn module."""


class FDFCNError(Exception):
    """Base class for all errors raised by fdfcn."""


class ShapeMismatch(FDFCNError, ValueError):
    pass


class KernelExceedsInput(FDFCNError, ValueError):
    pass


class ParityMismatch(FDFCNError, ValueError):
    pass


class LabelOutOfRange(FDFCNError, ValueError):
    pass


class EmptyGroup(FDFCNError, ValueError):
    pass


class AuditFailure(FDFCNError):
    """Raised when a network configuration does not produce consistent shapes.

    ``table`` holds the stage rows computed before the failure and
    ``final_edge`` the last spatial edge reached, when known.
    """

    def __init__(self, message, table=None, final_edge=None):
        super().__init__(message)
        self.table = table or []
        self.final_edge = final_edge


class FormatError(FDFCNError):
    pass


class VersionMismatch(FormatError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class UnsupportedDatatype(FormatError):
    pass


class HeaderMismatch(FormatError):
    pass


class UnknownLabel(FDFCNError, KeyError):
    pass


class LengthMismatch(FDFCNError, ValueError):
    pass


class InsufficientMask(FDFCNError, ValueError):
    pass


class NoConvergence(FDFCNError, ArithmeticError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class ZeroVector(FDFCNError, ValueError):
    pass


class EpochOutOfRange(FDFCNError, ValueError):
    pass


class WrongSubjectCount(FDFCNError, ValueError):
    pass


class DataMissing(FDFCNError, FileNotFoundError):
    pass


class NonFiniteLoss(FDFCNError, ArithmeticError):
    pass


class NonFiniteTensor(FDFCNError, ArithmeticError):
    pass
