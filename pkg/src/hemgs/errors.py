"""Exception hierarchy shared by every stage of the codec."""


class HemgsError(Exception):
    """Base class for all library errors."""


class SceneFormatError(HemgsError):
    """A scene file could not be parsed."""

    def __init__(self, message, record=None):
        self.record = record
        if record is not None:
            message = f"{message} (record {record})"
        super().__init__(message)


class HeaderError(SceneFormatError):
    pass


class NonFiniteError(SceneFormatError):
    pass


class OutOfBoundsError(SceneFormatError):
    pass


class DuplicateVoxelError(HemgsError):
    """Two anchors map to the same voxel."""


class SymbolRangeError(HemgsError):
    """A symbol lies outside the alphabet of its distribution."""


class DecodeError(HemgsError):
    pass


class TruncatedStreamError(DecodeError):
    pass


class BitstreamFormatError(DecodeError):
    pass


class ChecksumError(DecodeError):
    pass


class DigestMismatchError(DecodeError):
    pass


class EscapeOverflowError(HemgsError):
    """Attribute symbol too far from the predicted mean for the raw fallback."""

    def __init__(self, message, anchor=None):
        self.anchor = anchor
        super().__init__(message)


class CausalityError(HemgsError):
    """A context references an anchor that is not decoded yet."""


class DivergenceError(HemgsError):
    """Training produced a non-finite loss."""

    def __init__(self, message, checkpoint=None, iteration=None):
        self.checkpoint = checkpoint
        self.iteration = iteration
        super().__init__(message)
