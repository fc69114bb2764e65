"""Error taxonomy shared across the package."""


class ConfigurationError(ValueError):
    """Bad experiment/architecture configuration (unknown family, unknown key, ...)."""


class ValidationError(ValueError):
    """Inputs violate an operation's preconditions (shape/cardinality/range)."""


class NumericError(RuntimeError):
    """Non-finite values encountered during optimization or estimation."""


class SurgeryError(RuntimeError):
    """Pruning surgery could not preserve a valid, function-equivalent graph."""


class AttackError(RuntimeError):
    """Attack pipeline failure (oracle mismatch, divergence)."""


class IngestionError(RuntimeError):
    """Dataset could not be loaded (empty folder, corrupt images)."""


class ReportingError(RuntimeError):
    """Report emission failed (e.g. drops requested without a baseline record)."""
