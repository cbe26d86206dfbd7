"""Exception types shared across the engine."""


class ConfigError(ValueError):
    """Invalid configuration value, file, or preset name."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class InvalidMaskError(ValueError):
    """A subnetwork mask is empty, out of range, or inconsistent."""


class TapeError(RuntimeError):
    """Backward called on a missing or already-consumed tape."""


class NumericalError(ArithmeticError):
    """A non-finite value (NaN/inf) reached a point where it must not."""


class StreamTerminatedError(RuntimeError):
    """The asynchronous mask producer died; the cause is chained."""


class CorpusError(ValueError):
    """Corpus file is unreadable, too short, or contains bad token ids."""
