"""Exception hierarchy shared by every module.

Each error carries an ``exit_code`` used by the command line front end:
2 for data/validation problems, 3 for numeric failures.
"""


class AffexError(Exception):
    exit_code = 2


class ShapeError(AffexError, ValueError):
    pass


class ContractError(AffexError, ValueError):
    """A caller broke an operation's precondition."""


class ValidationError(AffexError, ValueError):
    pass


class RangeError(ValidationError):
    pass


class ManifestParseError(ValidationError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyDatasetError(AffexError):
    pass


class InvalidWindowError(ContractError):
    pass


class ConfigurationError(AffexError):
    pass


class CoverageError(AffexError):
    def __init__(self, missing, message=None):
        self.missing = list(missing)
        if message is None:
            shown = ", ".join(f"({v}, {f})" for v, f in self.missing[:10])
            message = f"{len(self.missing)} frame(s) missing: {shown}"
        super().__init__(message)


class IntegrityError(AffexError):
    pass


class CompatibilityError(AffexError):
    pass


class NumericError(AffexError, ArithmeticError):
    exit_code = 3
