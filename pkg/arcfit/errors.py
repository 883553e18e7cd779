from typing import Optional


class ArcfitError(Exception):
    """
    Base of all errors raised by arcfit.
    """

    def with_context(self, text: str) -> "ArcfitError":
        """
        Append a piece of context to the message and return self,
        for use in ``raise error.with_context(...) from error``.
        """
        message = self.args[0] if self.args else ""
        self.args = (f"{message} [{text}]", ) + tuple(self.args[1:])
        return self


class InvalidInputError(ArcfitError, ValueError):
    pass


class RangeError(ArcfitError, ValueError):
    pass


class DataFileError(InvalidInputError):
    """
    A data file could not be turned into a trace.

    ``row`` is the 1-based data row (header excluded), ``column`` the column name,
    either may be None.
    """

    def __init__(self, message: str, path: Optional[str] = None,
                 row: Optional[int] = None, column: Optional[str] = None):
        location = []
        if path is not None:
            location.append(str(path))
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        if location:
            message = f"{', '.join(location)}: {message}"
        super().__init__(message)
        self.path = path
        self.row = row
        self.column = column


class StagingError(ArcfitError):

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class InsufficientDataError(ArcfitError):

    def __init__(self, message: str, stage: Optional[int] = None, n_points: int = 0):
        super().__init__(message)
        self.stage = stage
        self.n_points = n_points


class IntegrationError(ArcfitError):
    """
    Base of the integrator failures. ``trajectory`` holds what was
    integrated up to the failure, if anything.
    """

    def __init__(self, message: str, trajectory=None, time: Optional[float] = None):
        super().__init__(message)
        self.trajectory = trajectory
        self.time = time


class StiffnessError(IntegrationError):
    pass


class SingularSystemError(IntegrationError):
    pass


class SolverError(ArcfitError):

    def __init__(self, message: str, node: Optional[int] = None, time: Optional[float] = None):
        if node is not None:
            message = f"{message} (node {node})"
        super().__init__(message)
        self.node = node
        self.time = time


class DivergedTrainingError(ArcfitError):

    def __init__(self, message: str, best=None, step: Optional[int] = None, history=None):
        super().__init__(message)
        self.best = best
        self.step = step
        self.history = history


class ConfigError(ArcfitError, ValueError):

    def __init__(self, message: str, key: Optional[str] = None):
        if key:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


class UsageError(ArcfitError):
    pass


class OutputFileError(ArcfitError):

    def __init__(self, message: str, path: Optional[str] = None):
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path
