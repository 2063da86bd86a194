"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class ConfigError(ValueError):
    """A configuration or spec violates a structural constraint."""


class ContractError(RuntimeError):
    """An API precondition was not met (e.g. backward on a non-scalar)."""


class AccountingError(RuntimeError):
    """Analytic and instrumented MAC counts disagree."""


class FormatError(ValueError):
    """A file could not be parsed."""


class WeightMismatchError(ValueError):
    """Stored weights do not match the model's parameter layout."""
