"""Exception hierarchy shared by the library and the command line."""


class MufuruError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MufuruError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(MufuruError, ValueError):
    """A value lies outside the domain of a function (e.g. log of a non-positive number)."""


class DataError(MufuruError, ValueError):
    """Malformed or inconsistent dataset contents."""


class FormulaParseError(DataError):
    """A logic token sequence does not follow the v v g v g ... pattern."""

    def __init__(self, message, position):
        super().__init__(f"{message} (token position {position})")
        self.position = position


class ConfigError(MufuruError, ValueError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"config field {field!r}: {message}")
        self.field = field


class TrainingDiverged(MufuruError, RuntimeError):
    """Raised when the training loss becomes NaN or infinite."""

    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
