"""Exception hierarchy shared by every clap module."""


class ClapError(Exception):
    """Base class for all errors raised by clap."""


class ShapeMismatch(ClapError, ValueError):
    pass


class DegenerateInput(ClapError, ValueError):
    pass


class InvalidRate(ClapError, ValueError):
    pass


class InvalidLabel(ClapError, ValueError):
    pass


class ContextMismatch(ClapError, RuntimeError):
    """A backward call received a context from a different (or already consumed) forward."""


class InvalidConfig(ClapError, ValueError):
    pass


class InvalidLayer(ClapError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DivergenceDetected(ClapError, FloatingPointError):
    """Raised when the training loss becomes non-finite.

    ``last_good`` holds the most recent finite training state (a
    :class:`clap.checkpoint.TrainState`) so callers can persist it.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class CorruptCheckpoint(ClapError, ValueError):
    pass


class EmptyDataset(ClapError, ValueError):
    pass


class EmptyMatrix(ClapError, ValueError):
    pass


class MalformedImage(ClapError, ValueError):
    pass


class InsufficientData(ClapError, ValueError):
    pass
