"""Exception hierarchy shared across the package."""


class VaeSlmcError(Exception):
    """Base class for all package errors."""


class DimensionError(VaeSlmcError, ValueError):
    """An array or file does not have the expected dimensions."""


class StateError(VaeSlmcError, RuntimeError):
    """An operation was called in the wrong state (e.g. backward before forward)."""


class CorruptFileError(VaeSlmcError, ValueError):
    """A checkpoint file is truncated or has an invalid header."""


class TrainingError(VaeSlmcError, RuntimeError):
    """Training produced a non-finite loss or gradient.

    ``param_index``, ``epoch`` and ``batch`` locate the failure when known.
    """

    def __init__(self, message, *, param_index=None, epoch=None, batch=None):
        super().__init__(message)
        self.param_index = param_index
        self.epoch = epoch
        self.batch = batch


class ConfigError(VaeSlmcError, ValueError):
    """Invalid configuration. ``path`` is a JSON path when available."""

    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{path}: {message}")
        self.path = path


class InsufficientSamplesError(VaeSlmcError, ValueError):
    """Not enough raw samples to build a training set; extend T."""


class AnnealingError(VaeSlmcError, RuntimeError):
    """Annealing aborted. ``trace`` holds the records collected so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
