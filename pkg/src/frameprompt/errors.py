"""Exception hierarchy. Everything raised on purpose derives from FramePromptError."""


class FramePromptError(Exception):
    """Base class for all engine errors."""


class ShapeError(FramePromptError):
    """Operand shapes are incompatible; message carries both shapes."""


class ConfigError(FramePromptError):
    """Bad configuration file or constraint violation."""


class DataError(FramePromptError):
    """Dataset is malformed, empty, or violates a precondition."""


class FormatError(FramePromptError):
    """A binary artifact failed to parse."""


class BadMagicError(FormatError):
    """Leading magic bytes are wrong."""


class TruncatedFileError(FormatError):
    """File ended before the declared payload."""


class FingerprintMismatchError(FormatError):
    """Stored fingerprint does not match recomputed one."""


class FrozenViolationError(FramePromptError):
    """Attempt to mutate or re-train frozen weights."""
