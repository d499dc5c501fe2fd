"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DvdError(Exception):
    exit_code = 1


class ParameterError(DvdError, ValueError):
    """Out-of-range hyperparameter or argument."""

    exit_code = 2


class DataError(DvdError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class DegenerateFeatureError(DataError):
    """A feature vector with zero norm reached a cosine-similarity consumer."""


class FormatError(DataError):
    """Malformed DVDF / DVD1 file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractError(DvdError, RuntimeError):
    exit_code = 4


class FrozenError(ContractError):
    """Attempted to mutate a frozen network."""


class CheckpointRoleError(ContractError):
    pass


class SourceAccessError(ContractError):
    """Source data was touched inside a source-free region."""


class HiddenLabelAccessError(ContractError, AttributeError):
    pass


class StateError(DvdError, RuntimeError):
    pass


class NumericError(DvdError, ArithmeticError):
    exit_code = 5
