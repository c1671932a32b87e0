"""Exception hierarchy shared by all fedaria modules."""


class FedAriaError(Exception):
    pass


class ValidationError(FedAriaError, ValueError):
    """An argument violates an operation's precondition."""


class DimensionError(ValidationError):
    """Vector or matrix shapes do not line up."""


class DivergenceError(FedAriaError, ArithmeticError):
    def __init__(self, client_id, step, loss):
        self.client_id = client_id
        self.step = step
        self.loss = loss
        super().__init__(f"client {client_id} diverged at local step {step}: loss={loss!r}")


class InfeasiblePartitionError(FedAriaError):
    pass


class ParseError(FedAriaError, ValueError):
    pass


class BadMagicError(ParseError):
    pass


class TruncatedFileError(ParseError):
    pass


class CountMismatchError(ParseError):
    pass


class CheckpointError(FedAriaError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ResultsFormatError(ParseError):
    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}, line {line}: {message}")
