"""Exception hierarchy. The CLI maps each class to its own exit code."""


class CrownLabelError(Exception):
    """Base class for all package errors."""


class InputError(CrownLabelError, ValueError):
    """Input data or file failed validation."""


class SegmenterError(CrownLabelError):
    """The external segmenter could not be reached or answered badly."""


class MalformedResponseError(SegmenterError):
    """The segmenter replied, but the reply violates the wire schema."""


class InvariantError(CrownLabelError, AssertionError):
    """An internal consistency check failed."""
