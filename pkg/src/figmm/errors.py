"""Exception types raised by the imputation engine."""


class FigmmError(Exception):
    """Base class for all engine errors."""


class DegenerateCovarianceError(FigmmError, ValueError):
    """A covariance (sub)matrix could not be factorized even after a ridge."""

    def __init__(self, message, component=None):
        if component is not None:
            message = f"{message} (component {component})"
        super().__init__(message)
        self.component = component


class OutlierRecordError(FigmmError):
    """Every component density underflowed for a record."""

    def __init__(self, record):
        super().__init__(f"record {record}: all component densities underflow")
        self.record = record


class ConfigurationError(FigmmError, ValueError):
    pass


class InitializationError(FigmmError):
    pass


class ComponentCollapseError(FigmmError):
    """A mixture component received zero total weight in an M-step."""

    def __init__(self, component, iteration=None):
        msg = f"component {component} collapsed (zero total weight)"
        if iteration is not None:
            msg += f" at iteration {iteration}"
        super().__init__(msg)
        self.component = component
        self.iteration = iteration


class DegenerateReplicateError(FigmmError):
    def __init__(self, record, component, replicate):
        super().__init__(
            f"importance ratios underflow for record {record}, "
            f"component {component}, replicate {replicate}"
        )
        self.record = record
        self.component = component
        self.replicate = replicate


class SolverError(FigmmError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class UnknownCategoryError(FigmmError, KeyError):
    pass


class DataError(FigmmError, ValueError):
    """Malformed input data (unparsable cells, duplicate ids, empty files)."""
