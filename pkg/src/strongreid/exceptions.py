"""Named errors raised across the toolkit."""


class ConfigurationError(ValueError):
    """Invalid configuration value or combination of values."""


class SamplingError(ValueError):
    """A P x K batch cannot be drawn from the given dataset."""


class ScheduleError(ValueError):
    """Epoch outside the learning-rate schedule."""


class TrainingError(RuntimeError):
    """Training diverged or was started with an unusable batch."""
