"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class DataFormatError(ValueError):
    """A dataset file or record fails schema or invariant validation."""


class TrainingAborted(RuntimeError):
    """Training stopped because a loss component became non-finite."""
