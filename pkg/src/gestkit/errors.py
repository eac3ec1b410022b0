"""Exception hierarchy.

Errors fall into three families that map onto CLI exit codes: configuration
problems (2), bad input data (3) and estimation failures (4).
"""


class GestkitError(Exception):
    exit_code = 1


class ConfigError(GestkitError, ValueError):
    exit_code = 2


class DataError(GestkitError, ValueError):
    exit_code = 3


class EstimationError(GestkitError, RuntimeError):
    exit_code = 4


# panel
class FileUnreadable(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class NonBinaryTreatment(DataError):
    pass


class NonBinaryOutcome(DataError):
    pass


class MissingValue(DataError):
    pass


class EmptyResult(DataError):
    pass


class SingleArm(DataError):
    pass


class DuplicateUnit(DataError):
    pass


# glm
class Separation(EstimationError):
    pass


class Singular(EstimationError):
    pass


class NotConverged(EstimationError):
    pass


class DimensionMismatch(EstimationError, ValueError):
    pass


# gest
class NoCrossing(EstimationError):
    """The independence curve never changes sign; widen the grid."""


class GestFitError(EstimationError):
    def __init__(self, psi, cause):
        self.psi = psi
        self.cause = cause
        super().__init__(f"treatment model failed at psi={psi:.6g}: {cause}")


# iptw / diagnostics
class PositivityViolation(EstimationError):
    pass


class ContractViolation(EstimationError, ValueError):
    pass


class NonPositiveRR(ConfigError):
    pass


# bootstrap
class EstimatorFailure(EstimationError):
    pass


class DegenerateDistribution(EstimationError):
    pass


# synth
class InvalidRisk(ConfigError):
    pass


class InvalidDesign(DataError):
    pass
