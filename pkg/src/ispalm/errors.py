"""Exception types shared across the package."""


class IspalmError(Exception):
    """Base class for all errors raised by ispalm."""


class StructuralError(IspalmError, ValueError):
    """Operands disagree in block names, shapes or dimensions."""


class ConfigError(IspalmError, ValueError):
    """Invalid solver or experiment configuration."""


class UsageError(IspalmError, RuntimeError):
    """An object was used before it was set up correctly."""


class NotPositiveDefinite(IspalmError, ValueError):
    def __init__(self, pivot, value=None):
        self.pivot = pivot
        self.value = value
        super().__init__(f"matrix is not positive definite (pivot {pivot}, value {value!r})")


class NumericalError(IspalmError, ArithmeticError):
    """A nonfinite value appeared where a finite one is required.

    ``block`` and ``sample`` locate the failure when it can be attributed.
    Solver runs attach the rows recorded before the failure as ``trace``.
    """

    def __init__(self, message, block=None, sample=None):
        self.block = block
        self.sample = sample
        self.trace = None
        parts = [message]
        if block is not None:
            parts.append(f"block={block}")
        if sample is not None:
            parts.append(f"sample={sample}")
        super().__init__(", ".join(parts))


class FormatError(IspalmError, ValueError):
    """Malformed file content. ``offset`` is a byte offset or line number."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at {offset})"
        super().__init__(message)


class SingularProjection(IspalmError, ValueError):
    """Stiefel projection of a (numerically) rank-deficient matrix."""
