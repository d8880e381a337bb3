"""
Error hierarchy for the face3d toolkit
face3d/errors.py

Every error carries the process exit code the CLI should return:
2 configuration error, 3 data error, 4 internal error.
"""

from typing import Any, Dict, Optional


class Face3DError(Exception):
    """Base class for all toolkit errors"""

    exit_code = 4

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.context = dict(context or {})

    def with_context(self, **context) -> "Face3DError":
        """Attach extra context (e.g. scan_id) and return self for re-raising"""
        self.context.update(context)
        return self

    def __str__(self) -> str:
        if not self.context:
            return self.message
        details = ", ".join(f"{k}={v}" for k, v in sorted(self.context.items()))
        return f"{self.message} [{details}]"

    def __reduce__(self):
        # keeps context when re-raised from a worker process
        return _restore_error, (self.__class__, self.message, self.context)


def _restore_error(cls, message: str, context: Dict[str, Any]) -> Face3DError:
    error = cls.__new__(cls)
    Face3DError.__init__(error, message, context)
    return error


class ConfigError(Face3DError):
    exit_code = 2


class DataError(Face3DError):
    exit_code = 3


class InternalError(Face3DError):
    exit_code = 4


# ---- input files ----

class ParseError(DataError):
    """Malformed file content"""

    def __init__(self, message: str, path: Any = None, line: Optional[int] = None):
        context = {}
        if path is not None:
            context["path"] = str(path)
        if line is not None:
            context["line"] = line
        super().__init__(message, context)


class InvariantError(DataError):
    pass


class IoError(DataError):
    pass


class DuplicateScanError(DataError):
    pass


class UnknownLabelError(DataError):
    pass


class CountError(DataError):
    pass


# ---- geometry ----

class UnsupportedTopology(DataError):
    pass


class EmptyMesh(DataError):
    pass


class EmptyResult(DataError):
    pass


class DegenerateConfiguration(DataError):
    pass


class AllInvalidCurve(DataError):
    pass


# ---- features / learning / evaluation ----

class SubjectMismatch(DataError):
    pass


class KindMismatch(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class SingleClassError(DataError):
    pass


class SingleClassFold(SingleClassError):
    pass


class EmptyGroup(DataError):
    pass


# ---- statistics / rendering ----

class DegenerateVariance(DataError):
    pass


class TooFewSamples(DataError):
    pass


class DegenerateData(DataError):
    pass


class NonFiniteInput(DataError):
    pass


class UnknownAlpha(DataError):
    pass
