"""Exception hierarchy shared across the package."""


class TopFormerError(Exception):
    """Base class for all package errors."""


class ShapeError(TopFormerError, ValueError):
    pass


class ConfigError(TopFormerError, ValueError):
    pass


class InputError(TopFormerError, ValueError):
    pass


class InvariantError(TopFormerError, ValueError):
    pass


class StateError(TopFormerError, RuntimeError):
    pass


class FormatError(TopFormerError, ValueError):
    """Malformed file content. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BindError(TopFormerError, KeyError):
    """Weight store does not match the parameter slots of a model."""

    def __init__(self, missing=(), unexpected=(), mismatched=()):
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        self.mismatched = list(mismatched)
        parts = []
        if self.missing:
            parts.append("missing: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected: " + ", ".join(self.unexpected))
        if self.mismatched:
            parts.append("shape mismatch: " + ", ".join(self.mismatched))
        super().__init__("; ".join(parts))

    def __str__(self):
        return self.args[0]


class GradcheckError(TopFormerError, ArithmeticError):
    pass
