"""Exception hierarchy shared by the pipeline modules."""


class VtnetError(Exception):
    """Base class for domain errors raised by this package."""


class MalformedRow(VtnetError, ValueError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")


class UnknownTask(VtnetError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown task"


class UnlabeledTask(VtnetError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unlabeled task"


class EmptyAfterTrim(VtnetError, ValueError):
    pass


class InvalidConfig(VtnetError, ValueError):
    pass


class NoValidGaze(VtnetError, ValueError):
    pass


class EmptyInput(VtnetError, ValueError):
    pass


class TooFewMinority(VtnetError, ValueError):
    pass


class ShapeMismatch(VtnetError, ValueError):
    pass


class BadTarget(VtnetError, ValueError):
    pass


class NonFinite(VtnetError, ArithmeticError):
    pass


class EmptyTrainingSet(VtnetError, ValueError):
    pass


class TooFewUsers(VtnetError, ValueError):
    pass


class OneClassOnly(VtnetError, ValueError):
    pass
