"""Exception taxonomy shared across the package."""


class SemadvError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SemadvError):
    """A configuration value violates its documented range or format."""


class ShapeError(SemadvError):
    """Tensor shapes are incompatible with the requested operation."""


class NonDifferentiableError(SemadvError):
    """Backward pass reached a graph node with no registered derivative."""


class StepRangeError(SemadvError):
    """A diffusion step index or interval is out of range."""


class TrainingError(SemadvError):
    """Training diverged; carries the offending step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ContractError(SemadvError):
    """An operation precondition was violated by the caller."""


class SetupError(SemadvError):
    """Models, checkpoints, or files required for a run are inconsistent or missing."""


class NumericalFailureError(SemadvError):
    """A latent became non-finite mid-run; carries the diffusion step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class GraphError(SemadvError):
    """A hyponymy graph violates acyclicity or referential integrity."""


class UndefinedMetricError(SemadvError):
    """A metric's denominator is zero and the value is reported as undefined."""


class LevelError(SemadvError):
    """Image too small for the requested multi-scale level count."""

    def __init__(self, message, max_levels=None):
        super().__init__(message)
        self.max_levels = max_levels
