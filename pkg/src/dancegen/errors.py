"""Exception types shared across the toolkit."""


class DanceGenError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(DanceGenError, ValueError):
    pass


class ContractError(DanceGenError, ValueError):
    """An input violated a documented precondition (shape, range, ids)."""


class RangeError(DanceGenError, IndexError):
    pass


class SingularityError(DanceGenError, ZeroDivisionError):
    pass


class GuidanceError(DanceGenError, ValueError):
    pass


class CapabilityError(DanceGenError, TypeError):
    """A backend lacks a mechanism the caller requires (usually gradients)."""


class PlacementError(DanceGenError, ValueError):
    pass


class NumericalError(DanceGenError, ArithmeticError):
    pass


class UndefinedOKSError(DanceGenError, ValueError):
    """OKS is undefined when the ground truth has no labelled keypoints."""


class FormatError(DanceGenError, ValueError):
    """A persisted file has a bad magic string, version or size."""
