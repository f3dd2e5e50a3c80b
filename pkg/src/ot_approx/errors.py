"""Exception types shared by the solvers; each maps to a CLI exit code."""


class OTError(Exception):
    exit_code = 1


class InputError(OTError, ValueError):
    """Malformed input: parse failures, bad shapes, invalid parameters."""

    exit_code = 2


class InfeasibleError(OTError):
    """Unbalanced totals or a demand that cannot be reached."""

    exit_code = 3


class InvariantViolation(OTError, AssertionError):
    """An internal certificate failed; indicates a bug upstream."""

    exit_code = 4
