"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented process exit status (2 config/shape, 3 data, 4 numerical).
"""


class TopoError(Exception):
    exit_code = 1


class ConfigError(TopoError, ValueError):
    exit_code = 2


class DataError(TopoError, ValueError):
    exit_code = 3


class NumericalError(TopoError, ArithmeticError):
    exit_code = 4


class NonSquareDimension(ConfigError):
    pass


class FractionOutOfRange(ConfigError):
    pass


class ShapeMismatch(ConfigError):
    pass


class NonFiniteInput(NumericalError):
    pass


class NonScalarLoss(ConfigError):
    pass


class TokenOutOfVocab(DataError):
    pass


class SequenceTooLong(DataError):
    pass


class EmptySequence(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class DivergedLoss(NumericalError):
    pass


class TooFewPairs(NumericalError):
    pass


class SingleClassSplit(DataError):
    pass


class NonFiniteValue(NumericalError):
    pass


class VocabMismatch(DataError):
    pass
