"""Exception hierarchy.

Errors fall into three families that map onto CLI exit codes:
configuration problems (2), bad input data (3) and numerical failures (4).
"""


class RobustComBatError(Exception):
    exit_code = 1


class ConfigError(RobustComBatError, ValueError):
    exit_code = 2


class DataError(RobustComBatError, ValueError):
    exit_code = 3


class NumericalError(RobustComBatError, ArithmeticError):
    exit_code = 4


# -- data errors -------------------------------------------------------------

class MissingColumn(DataError):
    pass


class DuplicateSubjectId(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class MalformedValue(DataError):
    pass


class EmptySite(DataError):
    pass


class IoFailure(DataError):
    pass


class TaxonomyMismatch(DataError):
    pass


class SubjectMismatch(DataError):
    pass


class StratumTooSmall(DataError):
    pass


class PoolExhausted(DataError):
    pass


class ColumnTooShort(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class MissingLabels(DataError):
    pass


class SiteTooSmall(DataError):
    pass


class EmptySplit(DataError):
    pass


class EmptyInput(DataError):
    pass


class UnknownMethod(ConfigError):
    pass


class InvalidRange(ConfigError):
    pass


# -- numerical errors --------------------------------------------------------

class RankDeficientDesign(NumericalError):
    pass


class TooFewSubjects(NumericalError):
    pass


class ZeroResidualVariance(NumericalError):
    pass


class MaskTooAggressive(NumericalError):
    pass


class EBNonConvergence(NumericalError):
    pass


class NonPositiveDelta(NumericalError):
    pass


class ZeroDispersion(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class DegenerateBatch(NumericalError):
    pass


class NonPositiveStd(NumericalError):
    pass


class ZeroReferenceStd(NumericalError):
    pass


class DegenerateControls(NumericalError):
    pass
