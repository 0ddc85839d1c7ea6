"""Exception types. Each carries a short machine-readable ``code``."""


class CdeRailError(Exception):
    code = "ERROR"

    def __init__(self, message: str = "", **details):
        super().__init__(f"{self.code}: {message}" if message else self.code)
        self.details = details


class InfeasibleSpecError(CdeRailError, ValueError):
    code = "INFEASIBLE_SPEC"


class EmptyEpisodeError(CdeRailError, ValueError):
    code = "EMPTY_EPISODE"


class BadConfigError(CdeRailError, ValueError):
    code = "BAD_CONFIG"


class UnknownTrainError(CdeRailError, KeyError):
    code = "UNKNOWN_TRAIN"


class DimMismatchError(CdeRailError, ValueError):
    code = "DIM_MISMATCH"


class StaleCacheError(CdeRailError, RuntimeError):
    code = "STALE_CACHE"


class ShapeMismatchError(CdeRailError, ValueError):
    code = "SHAPE_MISMATCH"


class IncongruentError(CdeRailError, ValueError):
    code = "INCONGRUENT"


class UnderfullError(CdeRailError, RuntimeError):
    code = "UNDERFULL"


class EmptyBufferError(CdeRailError, RuntimeError):
    code = "EMPTY_BUFFER"


class NoDataError(CdeRailError, RuntimeError):
    code = "NO_DATA"


class ParseError(CdeRailError, ValueError):
    code = "PARSE_ERROR"

    def __init__(self, message: str = "", line: int | None = None, **details):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, line=line, **details)
        self.line = line


class ValidationError(CdeRailError, ValueError):
    code = "VALIDATION_ERROR"


class BadOrderError(CdeRailError, ValueError):
    code = "BAD_ORDER"


class InfeasibleError(CdeRailError, ValueError):
    code = "INFEASIBLE"


class MetricsIOError(CdeRailError, OSError):
    code = "IO_ERROR"

    def __init__(self, message: str = "", record: int | None = None, **details):
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message, record=record, **details)
        self.record = record
