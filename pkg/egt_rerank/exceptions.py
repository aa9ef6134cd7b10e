""" Errors raised by egt_rerank. All derive from RerankError. """
from typing import Optional


class RerankError(Exception):
    """ Base class for all errors of the package. """


class FormatError(RerankError, ValueError):
    """ File does not start with the expected magic bytes or header. """


class CorruptionError(RerankError, ValueError):
    """ Payload is truncated or disagrees with its declared header. """


class ValidationError(RerankError, ValueError):
    """ Content is well-formed but violates an invariant. """


class ParseError(RerankError, ValueError):
    """ A CSV row could not be parsed. Carries the 1-based line number. """

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(RerankError, ValueError):
    """ Invalid or inconsistent pipeline configuration. """


class TraversalError(RerankError, ValueError):
    """ Graph traversal was asked for something impossible. """


class StageError(RerankError):
    """ A pipeline stage failed. """

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {cause}")
