"""Exception types raised across the toolkit."""


class DualEraseError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatchError(DualEraseError, ValueError):
    pass


# masks
class MaskError(DualEraseError, ValueError):
    pass


class AllForegroundError(MaskError):
    pass


class AllBackgroundError(MaskError):
    pass


class MissingAlphaError(MaskError):
    pass


class NotPerfectSquareError(MaskError):
    pass


class UpscaleRequestedError(MaskError):
    pass


# attention statistics
class EmptyForegroundError(DualEraseError, ValueError):
    pass


class EmptyBackgroundError(DualEraseError, ValueError):
    pass


class NoCapturesError(DualEraseError, ValueError):
    pass


# attack
class BackendFailure(DualEraseError, RuntimeError):
    pass


class NonFiniteLossError(DualEraseError, FloatingPointError):
    """Raised when the dual loss stops being finite. Carries the partial trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class DivergedError(DualEraseError, FloatingPointError):
    pass


# metrics / defenses
class TooSmallError(DualEraseError, ValueError):
    pass


class EmptyCloudError(DualEraseError, ValueError):
    pass


class BadBitsError(DualEraseError, ValueError):
    pass


class BadKernelError(DualEraseError, ValueError):
    pass


# cli
class ConfigError(DualEraseError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class MissingArtifactError(DualEraseError, FileNotFoundError):
    pass
