"""Exception types shared across the package."""


class ModalSdeError(Exception):
    """Base class for package errors."""


class DimensionError(ModalSdeError, ValueError):
    """Array shapes or widths do not match a declared contract."""


class ConfigError(ModalSdeError, ValueError):
    """Invalid configuration, precondition violation, or unusable inputs."""


class NumericError(ModalSdeError, ArithmeticError):
    """A non-finite value appeared where finite math is required."""


class FormatError(ModalSdeError, ValueError):
    """A serialized artifact is corrupt, truncated, or of the wrong kind."""


class StateError(ModalSdeError, RuntimeError):
    """An operation was called in an invalid order (e.g. backward before forward)."""
