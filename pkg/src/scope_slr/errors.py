"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`ScopeError` and carries
the process exit code the CLI reports for its category.
"""

from __future__ import annotations


class ScopeError(Exception):
    exit_code = 1


class ConfigError(ScopeError):
    exit_code = 2


class DataError(ScopeError):
    exit_code = 3


class ManifestError(DataError):
    pass


class KeypointFormatError(DataError):
    pass


class SplitInfeasibleError(DataError):
    pass


class DegenerateEyelidError(DataError):
    """A frame whose eyelid span is too small to normalise by."""

    def __init__(self, message: str, frame_index: int | None = None):
        super().__init__(message)
        self.frame_index = frame_index


class PreprocessError(DataError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class RuleConflictError(DataError):
    pass


class NumericError(ScopeError):
    exit_code = 4


class NonFiniteError(NumericError):
    def __init__(self, op: str, detail: str = ""):
        msg = f"non-finite value produced by op '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.op = op


class CTCInfeasibleError(NumericError, ValueError):
    """Label sequence cannot be emitted in the available number of frames."""


class ZeroProbabilityError(NumericError):
    """Label sequence has probability exactly zero under the lattice."""


class ServiceError(ScopeError):
    exit_code = 5
