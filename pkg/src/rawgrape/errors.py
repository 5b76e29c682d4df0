"""Exception taxonomy shared across the package."""


class RawGrapeError(Exception):
    """Base class for all package-specific errors."""


class StructuralError(RawGrapeError):
    """Shape, dimension, or wiring mismatch (wrong channel count, stale cache)."""


class NumericError(RawGrapeError):
    """Non-finite values or numerically meaningless inputs."""


class StabilityError(RawGrapeError):
    """Recursive filter coefficient outside its stability region."""


class DomainError(RawGrapeError):
    """Parameter outside the mathematical domain of a model (e.g. Q <= 1/2)."""


class ConfigError(RawGrapeError):
    """Invalid or inconsistent experiment configuration."""


class EngineError(RawGrapeError):
    """Failure while evaluating an ensemble member."""
