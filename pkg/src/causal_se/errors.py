"""Exception hierarchy shared across the package."""


class CseError(Exception):
    """Base class for all package errors."""


class ShapeError(CseError, ValueError):
    pass


class NonFiniteError(CseError, FloatingPointError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        msg = f"non-finite values produced by op {op!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op


class ConfigError(CseError, ValueError):
    pass


class StructuralError(CseError, ValueError):
    """Checkpoint contents do not match the requested architecture."""


# audio


class AudioError(CseError):
    pass


class AudioFileMissingError(AudioError, FileNotFoundError):
    pass


class NotMonoError(AudioError, ValueError):
    pass


class UnsupportedBitDepthError(AudioError, ValueError):
    pass


class AudioFormatError(AudioError, ValueError):
    pass


class ManifestError(CseError, ValueError):
    pass


class SilentSignalError(CseError, ValueError):
    """SNR or SI-SDR is undefined for a zero-power reference."""


# tensor container


class ContainerError(CseError, ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class UnknownTensorError(ContainerError):
    pass


class MissingTensorError(ContainerError, KeyError):
    def __str__(self):
        return Exception.__str__(self)
