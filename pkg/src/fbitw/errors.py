"""Exception hierarchy.

``InputError`` subclasses describe problems with the data handed in (the CLI
maps them to exit code 2); ``EstimationError`` subclasses describe numerical
failures during estimation (exit code 3).
"""


class FbiError(Exception):
    """Base class for all package errors."""


class InputError(FbiError):
    pass


class EstimationError(FbiError):
    pass


class InvalidInput(InputError):
    pass


class ParseError(InputError):
    pass


class EmptySeries(InputError):
    pass


class DegenerateSeries(InputError):
    pass


class MaskedInput(InputError):
    pass


class NoBalancedBlock(InputError):
    pass


class StateError(FbiError):
    pass


class RankError(EstimationError):
    pass


class SingularDesign(EstimationError):
    pass


class OrderConditionError(EstimationError):
    pass


class CollinearLoadings(EstimationError):
    pass


class SingularSubBlock(EstimationError):
    pass


class InsufficientData(EstimationError):
    pass


class DegenerateDof(EstimationError):
    pass
