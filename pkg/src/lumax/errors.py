"""Exception types shared across the package."""


class LumaxError(Exception):
    """Base class for all package-specific errors."""


class DegenerateElementError(LumaxError):
    """Raised for tetrahedra with (near) zero volume."""


class NonManifoldError(LumaxError):
    """Raised when a face is shared by more than two tetrahedra."""


class MeshParseError(LumaxError):
    """Raised on malformed mesh files; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SolverError(LumaxError):
    """Raised when an iterative solver fails to reach its tolerance."""

    def __init__(self, message, residual=None, iterations=None, estimate=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.estimate = estimate


class FactorizationError(LumaxError):
    """Raised when a diagonal block is not SPD; identifies the node."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class AssemblyIntegrityError(LumaxError):
    """Raised when an assembled operator violates a structural guarantee."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class InstabilityError(LumaxError):
    """Raised when a time integration blows up; carries the step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
