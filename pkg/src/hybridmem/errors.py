"""Exception types raised by the package."""


class HybridmemError(Exception):
    """Base class for all package errors."""


class ConfigError(HybridmemError):
    """Invalid configuration document or inconsistent model definition."""


class ValidationError(HybridmemError):
    """A domain object violates one of its declared invariants."""


class ResolutionError(ValidationError):
    """A partition level cannot be represented on the grid."""


class KineticsError(HybridmemError):
    """A rate function evaluated outside its declared contract."""


class SchemeError(HybridmemError):
    """A discrete scheme violated a preserved property beyond tolerance."""


class NumericsError(HybridmemError):
    """Non-finite values or a failed linear algebra operation."""


class AnalysisError(HybridmemError):
    """An estimator cannot run at the requested accuracy."""


class InternalError(HybridmemError):
    """Inconsistent internal state; indicates a bug, not bad input."""
