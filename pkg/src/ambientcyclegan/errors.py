"""Exception types shared across the package."""


class ParameterDomainError(ValueError):
    """A parameter lies outside its valid domain."""


class ConfigError(ValueError):
    """An experiment or training configuration failed validation."""


class DataError(RuntimeError):
    """A dataset, manifest or image file is missing, malformed or unusable."""


class CheckpointError(DataError):
    """A checkpoint directory is incomplete, corrupt or version-incompatible."""


class TrainingDivergenceError(RuntimeError):
    """Training produced non-finite losses too many times in a row."""
