"""Exception types shared across the package."""


class FretError(Exception):
    """Base class for all package-specific errors."""


class UnsupportedArchitectureError(FretError):
    """The cut point does not name a single affine final layer."""


class EmptySelectionError(FretError):
    """A parameter policy or sample selection matched nothing."""


class ShapeMismatchError(FretError):
    """Matrix operands have incompatible shapes."""


class NonFiniteLossError(FretError):
    """A loss input or value is NaN or infinite."""


class NoNormLayersError(FretError):
    """The model has no normalization layers with stored statistics."""


class UnsupportedCorruptionError(FretError):
    """Corruption kind has no native implementation; needs a pre-corrupted archive."""


class InsufficientSamplesError(FretError):
    """A class has fewer samples than the long-tail profile requires."""


class ConfigError(FretError):
    """Experiment configuration failed validation; nothing was run."""


class RuntimeFailure(FretError):
    """An experiment failed mid-run; partial logs are retained."""


class EmptyRecordsError(FretError):
    """Plotting requires at least one adaptation record."""
