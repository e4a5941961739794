"""Shared exception types."""


class ConfigError(ValueError):
    """A configuration file or object failed validation."""


class TrainingError(RuntimeError):
    """An optimization loop produced a non-finite loss or parameters."""


class PropertyFailure(AssertionError):
    """A hard mechanism-property check did not hold."""
