class CrowdCellError(Exception):
    """Base class for all errors raised by crowdcell."""


class ImageFormatError(CrowdCellError, ValueError):
    """A PGM/PPM file is malformed or unsupported."""


class SequenceError(CrowdCellError, ValueError):
    """A frame sequence cannot be assembled (no matches, size mismatch...)."""


class ModelFormatError(CrowdCellError, ValueError):
    """A model file is truncated, has the wrong header or violates the schema.

    ``offset`` is the byte offset of the offending record, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ModelVersionError(ModelFormatError):
    """The model file header does not match the supported version."""


class ConfigError(CrowdCellError, ValueError):
    """Invalid, unknown or missing configuration keys."""


class ScenarioError(CrowdCellError, ValueError):
    """A synthetic scenario description is invalid."""
