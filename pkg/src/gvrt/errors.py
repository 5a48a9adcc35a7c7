class ConfigError(ValueError):
    """Raised for invalid user-facing configuration (unknown keys or out-of-range values)."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss. ``snapshot`` carries the step diagnostics."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
