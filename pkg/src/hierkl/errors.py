class HierKLError(Exception):
    """Base class for package errors."""


class ConfigError(HierKLError, ValueError):
    """Invalid configuration or mismatched dimensions."""


class ShapeMismatchError(ConfigError):
    """A checkpoint or component does not fit the requested wiring."""


class UsageError(HierKLError, RuntimeError):
    """An API was called out of order (e.g. backward without a forward record)."""


class NonFiniteError(HierKLError, FloatingPointError):
    """A gradient, loss or ratio was NaN or infinite."""


class EpisodeDoneError(UsageError):
    """Step called on an episode that already terminated."""


class ConvergenceError(HierKLError, ArithmeticError):
    """An iterative solver hit its iteration cap."""
