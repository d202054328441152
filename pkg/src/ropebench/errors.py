"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class OracleError(RuntimeError):
    """The finite-difference oracle hit a non-finite evaluation."""


class AnalysisError(ValueError):
    """Too little or invalid data for a timing analysis."""


class BenchIOError(OSError):
    """Reading or writing a benchmark artifact failed."""
