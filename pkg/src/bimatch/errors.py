"""Exception taxonomy shared across the package.

The CLI maps these onto its exit codes: ConfigError -> 2, I/O -> 3,
InfeasibleError -> 4, VerificationError/DivergenceError -> 5.
"""


class BimatchError(Exception):
    """Base class for package errors."""


class ShapeError(BimatchError):
    """Operand shapes violate an operation's contract."""


class ContractError(BimatchError):
    """A value-level precondition was violated."""


class InfeasibleError(BimatchError):
    """An assignment problem has no feasible solution at the given sizes."""


class DeterminismError(BimatchError):
    """A function that must be deterministic returned differing values."""


class ConfigError(BimatchError):
    """Invalid configuration or unparseable input payload."""


class GenerationError(BimatchError):
    """Scene synthesis could not satisfy its placement constraints."""


class DivergenceError(BimatchError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, state: dict | None = None):
        super().__init__(message)
        self.state = state or {}


class VerificationError(BimatchError):
    """An oracle or gradient verification sweep found a mismatch."""
