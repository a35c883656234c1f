class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DatasetError(RuntimeError):
    pass


class DatasetVersionError(DatasetError):
    pass


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given labels (e.g. a single class)."""


class NonFiniteError(FloatingPointError):
    pass


class CheckpointMismatchError(RuntimeError):
    pass
