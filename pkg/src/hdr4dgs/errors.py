"""Exception types raised across the package."""


class HDR4DGSError(Exception):
    """Base class for all package errors."""


class ContractViolation(HDR4DGSError, ValueError):
    pass


class DegenerateRotation(HDR4DGSError, ValueError):
    pass


class NonFiniteParameter(HDR4DGSError, ValueError):
    pass


class DegenerateTemporalVariance(HDR4DGSError, ValueError):
    pass


class InvalidExposure(HDR4DGSError, ValueError):
    pass


class EmptyScene(HDR4DGSError, ValueError):
    pass


class ColdBank(HDR4DGSError, RuntimeError):
    """Raised when the radiance bank window touches entries never written."""


class NonFiniteGradient(HDR4DGSError, FloatingPointError):
    pass


class ManifestError(HDR4DGSError, OSError):
    pass


class CheckpointError(HDR4DGSError, ValueError):
    pass
