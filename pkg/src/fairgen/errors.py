"""Exception types raised across the package."""


class FairgenError(Exception):
    """Base class for all package errors."""


class SchemaError(FairgenError, ValueError):
    pass


class IntegrityError(FairgenError, ValueError):
    pass


class ParseError(FairgenError, ValueError):
    pass


class CapacityError(FairgenError, ValueError):
    def __init__(self, message, group=None):
        super().__init__(message)
        self.group = group


class UndefinedRatioError(FairgenError, ValueError):
    pass


class SamplingError(FairgenError, ValueError):
    pass


class UndefinedSimilarityError(FairgenError, ValueError):
    pass


class DivisibilityError(FairgenError, ValueError):
    def __init__(self, message, suggested=None):
        super().__init__(message)
        self.suggested = suggested


class CatalogError(FairgenError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class GenerationError(FairgenError, RuntimeError):
    """Backend failure mid-run; ``completed`` lists groups/clusters already done."""

    def __init__(self, message, completed=(), partial=()):
        super().__init__(message)
        self.completed = list(completed)
        self.partial = list(partial)


class ScoringError(FairgenError, RuntimeError):
    pass


class SelectionError(FairgenError, ValueError):
    pass


class ConfigError(FairgenError, ValueError):
    pass


class DependencyError(FairgenError, RuntimeError):
    pass


class NumericalError(FairgenError, FloatingPointError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory or []


class EvaluationError(FairgenError, ValueError):
    pass
