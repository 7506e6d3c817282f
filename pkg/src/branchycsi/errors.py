"""Error types shared across the pipeline, training and tooling layers."""


class ParameterError(ValueError):
    """An argument is outside its documented domain."""


class ConfigurationError(ValueError):
    """A configuration object violates its invariants."""


class DataError(ValueError):
    """Input data cannot be processed (non-finite values, wrong shape)."""


class FormatError(ValueError):
    """A file does not follow its on-disk format."""
