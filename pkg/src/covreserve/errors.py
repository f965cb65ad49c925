"""Exception hierarchy shared by all modules."""


class ReservingError(Exception):
    """Base class; ``code`` is the machine-readable error kind."""

    code = "reserving-error"

    def to_record(self) -> dict:
        return {"error": self.code, "message": str(self)}


class ConfigurationError(ReservingError, ValueError):
    code = "invalid-configuration"


class InvalidPatternError(ReservingError, ValueError):
    code = "invalid-pattern"


class InvalidStatusError(ReservingError, ValueError):
    code = "invalid-status"


class ParseError(ReservingError, ValueError):
    code = "parse-error"

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)

    def to_record(self) -> dict:
        return {**super().to_record(), "line": self.line}


class DataIntegrityError(ReservingError, ValueError):
    code = "data-integrity"

    def __init__(self, message: str, claim_ids=()):
        self.claim_ids = list(claim_ids)
        super().__init__(message)

    def to_record(self) -> dict:
        return {**super().to_record(), "claim_ids": self.claim_ids}


class UnknownLevelError(ReservingError, ValueError):
    code = "unknown-level"


class MissingCovariateError(ReservingError, KeyError):
    code = "missing-covariate"

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class EmptyTriangleError(ReservingError, ValueError):
    code = "empty-triangle"


class DegenerateSupportError(ReservingError, ValueError):
    code = "degenerate-support"


class SeparationError(ReservingError, ValueError):
    code = "complete-separation"


class DivergedError(ReservingError, RuntimeError):
    code = "diverged"

    def __init__(self, message: str, trace=()):
        self.trace = list(trace)
        super().__init__(message)

    def to_record(self) -> dict:
        return {**super().to_record(), "trace": self.trace[-20:]}


class DomainError(ReservingError, ValueError):
    code = "domain-error"


class InsufficientDataError(ReservingError, ValueError):
    code = "insufficient-data"


class InfiniteMeanError(ReservingError, ValueError):
    code = "infinite-mean"


class NoModelError(ReservingError, ValueError):
    code = "no-model"


class UndefinedFactorError(ReservingError, ValueError):
    code = "undefined-factor"

    def __init__(self, column: int):
        self.column = column
        super().__init__(f"development factor undefined: column {column} sums to zero")


class DegenerateDispersionError(ReservingError, ValueError):
    code = "degenerate-dispersion"
