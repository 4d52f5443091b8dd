"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A configuration value or combination of values is unusable."""


class WeightLoadError(RuntimeError):
    """A weight archive is missing, corrupt, or does not match the expected manifest."""


class UndefinedMetricError(ValueError):
    """The requested metric is undefined on the given inputs (e.g. single-class labels)."""


class TrainingDiverged(RuntimeError):
    """Training was aborted because the loss became non-finite or exploded."""


class DatasetValidationError(ValueError):
    """A dataset directory does not satisfy the expected layout."""
