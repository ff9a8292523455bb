"""Shared exception types."""


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class ValidationError(ValueError):
    """A value violates a documented invariant (non-binary target, bad quaternion, ...)."""


class UsageError(RuntimeError):
    """An API called out of protocol (backward on non-scalar, step without grads, ...)."""


class ConfigError(ValueError):
    """A configuration value or combination is unusable."""


class FormatError(ValueError):
    """A serialized file is truncated, has a bad magic, or is otherwise unreadable."""
