"""Exception hierarchy.

Every error raised by the engine derives from :class:`BirbError`. The three
intermediate classes map onto CLI exit codes (config 2, data 3, protocol 4).
"""


class BirbError(Exception):
    exit_code = 1


class ConfigError(BirbError):
    exit_code = 2


class DataError(BirbError):
    exit_code = 3


class ProtocolError(BirbError):
    exit_code = 4


class ConfigInvalid(ConfigError):
    pass


# audio
class UnreadableFile(DataError):
    pass


class UnsupportedCodec(DataError):
    pass


class WaveformTooShort(DataError):
    pass


# peak finding
class EmptySpectrogram(DataError):
    pass


# corpus
class UnknownSpecies(DataError):
    pass


class BadSliceLength(DataError):
    pass


class SpeciesUnavailable(DataError):
    pass


class InsufficientWindows(DataError):
    pass


# embeddings
class SpectrogramTooSmall(DataError):
    pass


class SpeciesNotFound(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class CorruptStore(DataError):
    pass


class ProtocolViolation(ProtocolError):
    pass


class EmbedderFailure(ProtocolError):
    pass


# retrieval / metrics
class EmptyPool(DataError):
    pass


class ZeroVector(DataError):
    pass


class EmptySide(DataError):
    pass


class AllSpeciesSkipped(DataError):
    pass


class StageError(BirbError):
    """Wraps an error raised inside a pipeline stage, keeping its exit code."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
