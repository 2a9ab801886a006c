class ComixError(Exception):
    """Base class for every error raised by this package."""

    code = "error"


class ContractError(ComixError, ValueError):
    """A precondition on shapes, ranges or parameters was violated."""

    code = "invalid_value"


class FormatError(ComixError):
    """A file could not be parsed: bad magic, truncation, wrong shapes."""

    code = "format_error"


class VersionMismatchError(FormatError):
    code = "version_mismatch"


class HashMismatchError(ComixError):
    """An artifact was produced by a different model (or input) than expected."""

    code = "hash_mismatch"


class TrainingError(ComixError):
    code = "training_failed"
