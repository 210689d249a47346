"""Exception hierarchy. Each class maps to a stable CLI error prefix."""


class WeatherflowError(Exception):
    """Base class; `prefix` is the stable tag printed on stderr."""

    prefix = "error"


class ShapeError(WeatherflowError):
    """Tensor dimension or broadcast mismatch."""

    prefix = "shape"


class UsageError(WeatherflowError):
    """API misuse, e.g. backward() on a non-scalar."""

    prefix = "usage"


class DegenerateInputError(WeatherflowError):
    """Input renders an operation meaningless (all-occluded frame, empty valid set)."""

    prefix = "degenerate"


class AdmissibilityError(WeatherflowError):
    """Sampler cannot produce the requested number of patches."""

    prefix = "admissibility"


class FormatError(WeatherflowError):
    """Malformed file: bad magic, truncation, out-of-range encode."""

    prefix = "format"


class ConfigError(WeatherflowError):
    """Bad config key/value or incompatible flag combination."""

    prefix = "config"


class TrainingAbort(WeatherflowError):
    """Unrecoverable training state (NaN loss/grad, excessive skip rate)."""

    prefix = "training"
