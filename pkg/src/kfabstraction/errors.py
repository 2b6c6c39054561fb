"""Exception hierarchy.

Every error carries a short machine-readable ``code`` and a distinct process
``exit_code`` so the CLI can map failures without string matching.
"""


class KFAError(Exception):
    code = "KFA_ERROR"
    exit_code = 1


class DimensionMismatch(KFAError, ValueError):
    code = "DIMENSION_MISMATCH"
    exit_code = 10


class InvalidCovariance(KFAError, ValueError):
    code = "INVALID_COVARIANCE"
    exit_code = 11


class SingularObservationBlock(KFAError, ValueError):
    code = "SINGULAR_OBSERVATION_BLOCK"
    exit_code = 12


class InvalidInterval(KFAError, ValueError):
    code = "INVALID_INTERVAL"
    exit_code = 13


class FactorizationMismatch(KFAError, ValueError):
    code = "FACTORIZATION_MISMATCH"
    exit_code = 20


class NotAReduction(KFAError, ValueError):
    code = "NOT_A_REDUCTION"
    exit_code = 21


class Assumption1Violated(KFAError):
    code = "ASSUMPTION1_VIOLATED"
    exit_code = 22


class IllConditionedInnovation(KFAError, ArithmeticError):
    code = "ILL_CONDITIONED_INNOVATION"
    exit_code = 23


class NoConvergence(KFAError, ArithmeticError):
    code = "NO_CONVERGENCE"
    exit_code = 30


class NotStabilizing(KFAError):
    code = "NOT_STABILIZING"
    exit_code = 31


class DareNotPositiveDefinite(KFAError):
    code = "DARE_NOT_POSITIVE_DEFINITE"
    exit_code = 32


class PremiseViolated(KFAError):
    code = "PREMISE_VIOLATED"
    exit_code = 33


class Assumption2Violated(KFAError):
    code = "ASSUMPTION2_VIOLATED"
    exit_code = 34


class SingularR(KFAError, ArithmeticError):
    code = "SINGULAR_R"
    exit_code = 35


class FlavorMismatch(KFAError, ValueError):
    code = "FLAVOR_MISMATCH"
    exit_code = 40


class OutOfSchedule(KFAError, IndexError):
    code = "OUT_OF_SCHEDULE"
    exit_code = 41


class HorizonTooShort(KFAError, ValueError):
    code = "HORIZON_TOO_SHORT"
    exit_code = 42


class UnsupportedPolicy(KFAError, TypeError):
    code = "UNSUPPORTED_POLICY"
    exit_code = 50


class NonBoxSpec(KFAError, ValueError):
    code = "NON_BOX_SPEC"
    exit_code = 51


class ModelFileError(KFAError, ValueError):
    code = "MODEL_FILE_ERROR"
    exit_code = 60


class ArtifactMismatch(KFAError):
    code = "ARTIFACT_MISMATCH"
    exit_code = 61
