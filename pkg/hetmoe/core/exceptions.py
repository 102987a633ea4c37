"""
Exception hierarchy for hetmoe.

Library code raises these; only the CLI turns them into exit codes.
"""


class HetMoEError(Exception):
    """Base class for all hetmoe errors."""

    exit_code: int = 1


class ConfigError(HetMoEError, ValueError):
    """Invalid configuration or generator parameters."""

    exit_code = 2


class DataError(HetMoEError, ValueError):
    """Data that does not fit the task (e.g. label out of class range)."""

    exit_code = 2


class ShapeError(HetMoEError, ValueError):
    """Tensor dimension mismatch."""

    exit_code = 3


class DomainError(HetMoEError, ValueError):
    """Value outside an operation's domain."""

    exit_code = 3


class NumericError(HetMoEError, ArithmeticError):
    """Non-finite values encountered."""

    exit_code = 3


class TapeError(HetMoEError, RuntimeError):
    """Misuse of the gradient tape."""

    exit_code = 3


class StructuralError(HetMoEError):
    """Expert pool or router mutation that breaks a structural invariant."""

    exit_code = 4


class PlanError(StructuralError):
    """Adaptation plan that cannot be executed."""

    exit_code = 4


class RoutingError(HetMoEError, KeyError):
    """No router for the requested dataset."""

    exit_code = 5

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class DispatchError(HetMoEError, KeyError):
    """No head or routers for the requested dataset."""

    exit_code = 5

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class MissingEntityError(HetMoEError, LookupError):
    """A checkpoint, file or dataset selector that does not exist."""

    exit_code = 5
