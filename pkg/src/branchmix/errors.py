class BranchmixError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(BranchmixError, ValueError):
    pass


class InputError(BranchmixError, ValueError):
    pass


class TrainingError(BranchmixError, RuntimeError):
    pass


class TaskError(BranchmixError, ValueError):
    pass
