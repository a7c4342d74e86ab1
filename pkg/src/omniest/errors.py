"""Exception hierarchy.

Every error carries a ``kind`` string so Monte Carlo failure counts and CLI
exit codes can be keyed on it without isinstance ladders.
"""
from __future__ import annotations


class OmniError(Exception):
    kind = "OmniError"
    exit_code = 4


class DataError(OmniError, ValueError):
    kind = "DataError"
    exit_code = 3


class ConfigInvalid(OmniError, ValueError):
    kind = "ConfigInvalid"
    exit_code = 2


class NumericalError(OmniError, ArithmeticError):
    kind = "NumericalError"
    exit_code = 4


# data model
class NonMonotoneDropout(DataError):
    kind = "NonMonotoneDropout"


class MissingBaseline(DataError):
    kind = "MissingBaseline"


class DuplicateSlot(DataError):
    kind = "DuplicateSlot"


class EmptyHospital(DataError):
    kind = "EmptyHospital"


class UnknownCovariate(DataError):
    kind = "UnknownCovariate"


class StrataNotHospitalConstant(DataError):
    kind = "StrataNotHospitalConstant"


# dropout model
class NoDropoutEvents(NumericalError):
    kind = "NoDropoutEvents"


class CompleteSeparation(NumericalError):
    kind = "CompleteSeparation"


class SingularInformation(NumericalError):
    kind = "SingularInformation"


class DegeneratePi(NumericalError):
    kind = "DegeneratePi"


# estimators
class RankDeficientDesign(NumericalError):
    kind = "RankDeficientDesign"

    def __init__(self, message, covariates=()):
        super().__init__(message)
        self.covariates = tuple(covariates)


class ZeroWeightHospital(NumericalError):
    kind = "ZeroWeightHospital"

    def __init__(self, message, hospitals=()):
        super().__init__(message)
        self.hospitals = tuple(hospitals)


# inference
class SingularBread(NumericalError):
    kind = "SingularBread"


class NegativeVarianceDiagonal(NumericalError):
    kind = "NegativeVarianceDiagonal"


class KTooLarge(NumericalError, ValueError):
    kind = "KTooLarge"


class SingleCluster(NumericalError, ValueError):
    kind = "SingleCluster"


# reporting
class IncompatibleReports(OmniError, ValueError):
    kind = "IncompatibleReports"
    exit_code = 3
