"""Exception hierarchy.

Every error carries a short ``category`` string that the command line
front end prints so callers can branch on it without parsing messages.
"""


class DPCCError(Exception):
    category = "error"


class InvalidProgram(DPCCError):
    category = "invalid_program"


class InvalidQuery(DPCCError):
    category = "invalid_query"


class InvalidPrivacy(DPCCError):
    category = "invalid_privacy"


class OutOfRange(DPCCError):
    category = "out_of_range"


class SolverFailure(DPCCError):
    category = "solver_failure"

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class NotImplementable(DPCCError):
    category = "not_implementable"


class PrivacyTooStrong(DPCCError):
    """The chance-constrained program is infeasible for the requested
    noise level and violation budget."""

    category = "privacy_too_strong"


class ParseError(DPCCError):
    category = "parse_error"

    def __init__(self, message, line=None, field=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.line = line
        self.field = field


class ConnectivityError(DPCCError):
    category = "connectivity"


class DegenerateBase(DPCCError):
    category = "degenerate_base"
