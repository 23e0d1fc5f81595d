"""Exception hierarchy. The CLI maps each family onto an exit code."""


class TokenTrajError(Exception):
    """Base class for all library errors."""


class DataError(TokenTrajError, ValueError):
    """Bad or inconsistent input data (CLI exit code 2)."""


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class DuplicateNameError(DataError):
    pass


class UnknownVariableError(DataError):
    pass


class MalformedTimestampError(DataError):
    pass


class StaticTimestampError(DataError):
    pass


class UnknownLabelError(DataError):
    pass


class DuplicatePatientError(DataError):
    pass


class PanelMismatchError(DataError):
    pass


class NumericError(TokenTrajError, ArithmeticError):
    """Numerical failure or undefined metric (CLI exit code 3)."""


class UndefinedMetricError(NumericError):
    pass


class EmptyPanelError(NumericError):
    pass


class BudgetExceededError(NumericError):
    pass
