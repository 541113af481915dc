"""Exception hierarchy.

Every error raised on purpose derives from CmoeError so the CLI can map
failures onto its exit codes (config=1, data=2, numeric=3).
"""


class CmoeError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class ConfigError(CmoeError):
    """Bad run configuration: unknown keys, invalid values, missing sections."""

    exit_code = 1


class ShapeError(CmoeError):
    """Tensor or matrix dimensions violate an operation's contract."""


class AudioFormatError(CmoeError):
    """File is not a readable RIFF/WAVE container."""


class UnsupportedFormatError(AudioFormatError):
    """WAV encoding outside PCM 16/32-bit int or 32-bit float."""


class EmptyAudioError(AudioFormatError):
    """WAV file with a zero-length payload."""


class BandError(CmoeError):
    """Effective frequency band outside [0, sample_rate/2] or inverted."""


class PlanError(CmoeError):
    """Invalid framing or constant-Q plan parameters."""


class TooShortError(CmoeError):
    """Signal shorter than a single analysis frame."""


class FilterBankError(CmoeError):
    """Degenerate filter bank: a filter covers no spectrum bins."""


class ManifestError(CmoeError):
    """Manifest/split-table inconsistency (unknown or duplicate source ids)."""


class LeakageError(ManifestError):
    """A source id appears in both the train and the test split."""


class LabelError(CmoeError):
    """Class label index outside [0, num_classes)."""


class NumericError(CmoeError):
    """Non-finite loss or a failed numeric safety check during training."""

    exit_code = 3


class CheckpointError(CmoeError):
    """Malformed checkpoint or feature-cache file."""


class CacheMissError(CmoeError):
    """Feature requested in cache-only mode but absent from the cache."""
