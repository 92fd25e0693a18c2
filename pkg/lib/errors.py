"""Exception hierarchy shared by every module of the transfer optimizer.

Convergence failures are reported through solver status values, not raised.
The classes below cover bad inputs, broken geometry, failed propagations and
structural mismatches.
"""


class TransferError(Exception):
    """Base class for all errors raised by the library."""


class DomainError(TransferError, ValueError):
    """An input lies outside the domain where the formulas are defined."""


class DegenerateGeometryError(DomainError):
    """The orbit geometry is degenerate (w <= 0) and no position can be formed."""


class ExtrapolationError(DomainError):
    """A query time lies outside the span of a solved trajectory."""


class ConfigurationError(TransferError, ValueError):
    """Unknown study/case, invalid options or a malformed config file."""


class NlpStructureError(TransferError, ValueError):
    """Dimensions of an NLP, its start point or its mesh do not agree."""


class PropagationError(TransferError, RuntimeError):
    """The ODE integrator could not complete the requested span."""


class EventNotReachedError(PropagationError):
    """A terminal event was required but never bracketed within the span."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class StallError(TransferError, RuntimeError):
    """
    The chained sub-problem objective stopped decreasing.

    Attributes:
        history (list[float]): Objective value at the end of every completed cycle.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])

    def diagnostics(self):
        return {"error": type(self).__name__, "message": str(self), "objective_history": self.history}


class StructureSolveError(TransferError, RuntimeError):
    """
    A regime-typed solve failed.

    Attributes:
        structure: The ControlStructure that was being solved.
        solution: The last NlpSolution returned by the backend, if any.
        history (list[dict]): Per-iteration diagnostics gathered before the failure.
    """

    def __init__(self, message, structure=None, solution=None, history=None):
        super().__init__(message)
        self.structure = structure
        self.solution = solution
        self.history = list(history or [])

    def diagnostics(self):
        report = {"error": type(self).__name__, "message": str(self)}
        if self.structure is not None:
            report["structure"] = self.structure.to_records()
        if self.solution is not None:
            report["solver_status"] = self.solution.status.value
            report["violation"] = float(self.solution.violation)
        if self.history:
            report["history"] = self.history
        return report
