"""Exception hierarchy shared by every module."""


class FusionLMError(Exception):
    pass


class DimensionError(FusionLMError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(FusionLMError, ValueError):
    """A model, training or run configuration is invalid."""


class DataError(FusionLMError, ValueError):
    """Input data (corpus, manifest, feature file) is malformed or empty."""


class NumericalError(FusionLMError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""
