"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Array shapes or backbone identities incompatible with the operation."""


class BackendUnavailableError(RuntimeError):
    """A frozen-pretrained backbone reference could not be resolved."""


class EmptyDatasetError(ValueError):
    pass


class EmptyStoreError(EmptyDatasetError):
    pass


class NormalizedLatentError(ValueError):
    """A normalized latent was passed where an unnormalized one is required."""


class InsufficientDataError(ValueError):
    pass


class StatsMissingError(RuntimeError):
    """Latent normalization statistics have not been estimated yet."""


class UnknownEmbodimentError(KeyError):
    pass


class ModeUnavailableError(RuntimeError):
    """Requested prediction mode is not present on this model."""


class NonFiniteLossError(RuntimeError):
    """Loss became NaN/Inf; the offending update was not applied."""


class StoreFormatError(ValueError):
    """Bad magic, version, truncation, or checksum in an episode store file."""


class ConfigError(ValueError):
    """Unknown key or schema violation in a run configuration."""
