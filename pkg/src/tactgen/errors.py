"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class CaptionError(ValueError):
    """Caption construction violated the template contract."""


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed; message names the file."""


class DatasetIntegrityError(RuntimeError):
    """Dataset contents disagree with the manifest."""


class TrainingError(RuntimeError):
    """Non-finite loss or other unrecoverable training state."""


class SamplingError(RuntimeError):
    """Sampler aborted; message carries the offending step index."""
