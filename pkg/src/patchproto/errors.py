"""Exception types raised by the patchproto package."""


class PatchProtoError(Exception):
    """Base class for all patchproto errors."""


class FormatError(PatchProtoError, ValueError):
    """A binary container file violates the on-disk format."""


class ManifestError(PatchProtoError, ValueError):
    """A dataset manifest is malformed or internally inconsistent."""


class ParameterError(PatchProtoError, ValueError):
    """A numeric parameter is outside its allowed range."""


class DimensionMismatchError(PatchProtoError, ValueError):
    """Embedding dimensions of two inputs do not agree."""
