"""Exception hierarchy shared by every simulator module."""


class SimulationError(Exception):
    """Base class for errors raised by the simulator."""


class ConfigurationError(SimulationError, ValueError):
    """An input violates a documented precondition or invariant."""


class NotFoundError(SimulationError, KeyError):
    """A referenced client or node does not exist."""

    def __str__(self) -> str:
        return Exception.__str__(self)


class UndefinedValueError(SimulationError, ArithmeticError):
    """A quantity is undefined for the given input (e.g. degree of an empty graph)."""


class IngestionError(SimulationError, ValueError):
    """External data (CSV) does not match the expected schema."""


class NumericalDivergenceError(SimulationError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class AggregationError(SimulationError, ValueError):
    """Models passed to an aggregation rule are not compatible."""


class GeneratorEmptyError(SimulationError, ValueError):
    """A synthetic-data generator has no class to sample from."""


class InternalError(SimulationError, RuntimeError):
    """An internal contract was broken (unknown action kind, shape mismatch)."""


class SchemaError(ConfigurationError):
    """A config document has the wrong shape; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path
