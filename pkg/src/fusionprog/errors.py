"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config value or combination of values is unusable."""


class ManifestError(ValueError):
    """A manifest file cannot be parsed or one of its paths cannot be resolved."""


class VolumeFormatError(ValueError):
    """An on-disk volume directory violates the raw-slice container format."""


class ImputationError(ValueError):
    """Imputation cannot be fitted or applied."""


class TrainingError(RuntimeError):
    """A training run hit a non-recoverable condition (non-finite loss, leakage, ...)."""


class CheckpointError(ValueError):
    """A checkpoint directory is malformed or incompatible with the target model."""
