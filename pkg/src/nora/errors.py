"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """An operation produced a non-finite value."""

    def __init__(self, message: str, index=None, **info):
        super().__init__(message)
        self.index = index
        self.info = info


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """A configuration is invalid or inconsistent."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.message = message
        self.field = field

    def under(self, prefix: str) -> "ConfigError":
        """Same error with its field re-anchored below ``prefix``."""
        if not prefix:
            return self
        return ConfigError(self.message, f"{prefix}.{self.field}" if self.field else prefix)
