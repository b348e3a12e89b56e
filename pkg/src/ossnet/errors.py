"""Exception types shared across the package."""


class OssNetError(Exception):
    """Base class for all package errors."""


class FormatError(OssNetError, ValueError):
    """A file does not follow the expected container layout."""


class SizeError(FormatError):
    """A payload is shorter or longer than its header declares."""


class ShapeError(OssNetError, ValueError):
    """Array shapes do not agree with each other or with a configuration."""


class NumericError(OssNetError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class CapabilityError(OssNetError, RuntimeError):
    """The requested operation needs a model feature that is disabled."""


class ContractError(OssNetError, RuntimeError):
    """A pluggable callable violated its interface contract."""
