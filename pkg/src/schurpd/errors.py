"""Exception types shared across the package."""


class SchurPDError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SchurPDError, ValueError):
    """A caller-supplied argument violates a documented precondition."""


class MeshFileError(SchurPDError):
    """Malformed mesh file. Carries the offending 1-based line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateElementError(SchurPDError):
    """An element has non-positive or near-zero rest volume."""

    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


class EmptyRegionError(SchurPDError):
    """A proxy placement region touches no surface triangle."""


class PartitionError(SchurPDError):
    """A structural invariant of the x1/x2 split is violated."""


class IndefiniteMatrixError(SchurPDError):
    """A factorization hit a non-positive pivot. Carries the column index."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class IndefiniteOperatorError(SchurPDError):
    """PCG encountered p'Ap <= 0: the operator is not SPD on this subspace."""


class ScenarioError(SchurPDError):
    """Scenario config violates the documented schema."""

    def __init__(self, message, key=None):
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


class SolverSetupError(SchurPDError):
    """The global system cannot be factorized as configured."""
